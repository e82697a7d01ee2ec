#pragma once

// Central finite-difference oracle shared by the unit tests and the acceptance run.

#include "rebasin/autodiff.hpp"
#include "rebasin/matching.hpp"
#include "rebasin/model_graph.hpp"

#include <functional>
#include <string>
#include <vector>

namespace rebasin::testing {

using Builder = std::function<ad::Var(ad::Tape&, const std::vector<ad::Var>&)>;

struct OpCase {
  std::string name;
  std::vector<std::pair<Index, Index>> shapes;
  Builder build;
  double offset = 0.0;  // added to random inputs (keeps e.g. norms away from 0)
};

// Scalarizes the op output with a fixed random weighting and compares the
// tape gradient of every input against central differences. Returns the worst
// norm-wise relative error ‖g − g_fd‖ / max(‖g‖, ‖g_fd‖, 1e-8).
inline double gradcheck(const std::vector<Matrix>& inputs, const Builder& build, std::uint64_t seed,
                        double eps = 1e-6) {
  Matrix weighting;
  {
    ad::Tape probe;
    std::vector<ad::Var> vars;
    for (const Matrix& m : inputs) vars.push_back(probe.constant(m));
    const ad::Var out = build(probe, vars);
    Rng rng(seed + 77);
    weighting = rng.normal_matrix(out.rows(), out.cols());
  }
  auto scalar = [&](const std::vector<Matrix>& xs) {
    ad::Tape t;
    std::vector<ad::Var> vars;
    for (const Matrix& m : xs) vars.push_back(t.constant(m));
    return build(t, vars).value().cwiseProduct(weighting).sum();
  };

  ad::Tape tape;
  std::vector<ad::Var> leaves;
  for (const Matrix& m : inputs) leaves.push_back(tape.leaf(m));
  const ad::Var loss = ad::sum(ad::hadamard(build(tape, leaves), tape.constant(weighting)));
  const ad::Gradients g = tape.backward(loss);

  double worst = 0.0;
  std::vector<Matrix> xs = inputs;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Matrix fd(inputs[k].rows(), inputs[k].cols());
    for (Index i = 0; i < fd.rows(); ++i)
      for (Index j = 0; j < fd.cols(); ++j) {
        const double keep = xs[k](i, j);
        xs[k](i, j) = keep + eps;
        const double up = scalar(xs);
        xs[k](i, j) = keep - eps;
        const double down = scalar(xs);
        xs[k](i, j) = keep;
        fd(i, j) = (up - down) / (2.0 * eps);
      }
    const Matrix ga = g[leaves[k]];
    const double denom = std::max({ga.norm(), fd.norm(), 1e-8});
    worst = std::max(worst, (ga - fd).norm() / denom);
  }
  return worst;
}

inline std::vector<Matrix> random_inputs(const OpCase& c, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Matrix> xs;
  for (auto [r, k] : c.shapes) xs.push_back(rng.normal_matrix(r, k).array() + c.offset);
  return xs;
}

inline std::vector<OpCase> op_cases() {
  using ad::Var;
  static const std::vector<Index> ids = {2, 0, 3, 3, 1};
  static const std::vector<std::int32_t> targets = {1, -1, 0, 3, 2, 2};
  return {
      {"matmul", {{3, 4}, {4, 2}}, [](ad::Tape&, const std::vector<Var>& x) { return ad::matmul(x[0], x[1]); }},
      {"add", {{3, 4}, {3, 4}}, [](ad::Tape&, const std::vector<Var>& x) { return ad::add(x[0], x[1]); }},
      {"sub", {{3, 4}, {3, 4}}, [](ad::Tape&, const std::vector<Var>& x) { return ad::sub(x[0], x[1]); }},
      {"add_row", {{3, 4}, {1, 4}}, [](ad::Tape&, const std::vector<Var>& x) { return ad::add_row(x[0], x[1]); }},
      {"scale", {{3, 4}}, [](ad::Tape&, const std::vector<Var>& x) { return ad::scale(x[0], -1.7); }},
      {"transpose", {{3, 4}}, [](ad::Tape&, const std::vector<Var>& x) { return ad::transpose(x[0]); }},
      {"hadamard", {{3, 4}, {3, 4}}, [](ad::Tape&, const std::vector<Var>& x) { return ad::hadamard(x[0], x[1]); }},
      {"sum", {{3, 4}}, [](ad::Tape&, const std::vector<Var>& x) { return ad::sum(x[0]); }},
      {"exp", {{3, 4}}, [](ad::Tape&, const std::vector<Var>& x) { return ad::exp(x[0]); }},
      {"relu", {{3, 4}}, [](ad::Tape&, const std::vector<Var>& x) { return ad::relu(x[0]); }},
      {"gelu", {{3, 4}}, [](ad::Tape&, const std::vector<Var>& x) { return ad::gelu(x[0]); }},
      {"row_softmax", {{3, 5}}, [](ad::Tape&, const std::vector<Var>& x) { return ad::row_softmax(x[0]); }},
      {"normalize_rows",
       {{3, 4}},
       [](ad::Tape&, const std::vector<Var>& x) { return ad::normalize_rows(x[0]); },
       2.0},
      {"normalize_cols",
       {{3, 4}},
       [](ad::Tape&, const std::vector<Var>& x) { return ad::normalize_cols(x[0]); },
       2.0},
      {"gather_rows", {{4, 3}}, [](ad::Tape&, const std::vector<Var>& x) { return ad::gather_rows(x[0], ids); }},
      {"concat_cols",
       {{3, 2}, {3, 4}},
       [](ad::Tape&, const std::vector<Var>& x) { return ad::concat_cols({x[0], x[1], x[0]}); }},
      {"concat_rows",
       {{2, 3}, {4, 3}},
       [](ad::Tape&, const std::vector<Var>& x) { return ad::concat_rows({x[1], x[0]}); }},
      {"slice", {{5, 6}}, [](ad::Tape&, const std::vector<Var>& x) { return ad::slice(x[0], 1, 3, 2, 4); }},
      {"kron_identity", {{3, 3}}, [](ad::Tape&, const std::vector<Var>& x) { return ad::kron_identity(x[0], 2); }},
      {"layernorm",
       {{4, 6}, {1, 6}, {1, 6}},
       [](ad::Tape&, const std::vector<Var>& x) { return ad::layernorm(x[0], x[1], x[2], 1e-5); }},
      {"rmsnorm",
       {{4, 6}, {1, 6}},
       [](ad::Tape&, const std::vector<Var>& x) { return ad::rmsnorm(x[0], x[1], 1e-5); }},
      {"cross_entropy",
       {{6, 4}},
       [](ad::Tape&, const std::vector<Var>& x) { return ad::cross_entropy(x[0], targets); }},
      {"attention_causal",
       {{6, 4}, {6, 4}, {6, 4}},
       [](ad::Tape&, const std::vector<Var>& x) { return ad::attention(x[0], x[1], x[2], 3, 2, 2, true); }},
      {"attention_full",
       {{6, 4}, {6, 4}, {6, 4}},
       [](ad::Tape&, const std::vector<Var>& x) { return ad::attention(x[0], x[1], x[2], 3, 2, 2, false); }},
  };
}

// The learned-matching objective as a function of dense maps (O, P_ff, P_h),
// i.e. the quantity whose gradient the straight-through estimator passes on.
inline double learned_objective_gradcheck(std::uint64_t seed, HeadSpace space = HeadSpace::circuits) {
  TransformerConfig c;
  c.layers = 2;
  c.heads = 2;
  c.d_model = 6;
  c.d_head = 3;
  c.d_ff = 5;
  c.vocab = 5;
  c.max_seq = 4;
  c.activation = Activation::gelu;
  Rng rng(seed);
  auto model = [&](std::uint64_t s) {
    TransformerParams p = init_params(c, s);
    std::vector<Matrix> t = flatten(p);
    for (Matrix& m : t) m = rng.normal_matrix(m.rows(), m.cols(), 0.5);
    unflatten(p, t);
    return absorb_layernorm(p, c).params;
  };
  const TransformerParams a = model(seed + 1), b = model(seed + 2);
  Batch batch;
  batch.inputs.resize(3, c.max_seq);
  batch.targets.resize(3, c.max_seq);
  for (Index i = 0; i < 3; ++i)
    for (Index j = 0; j < c.max_seq; ++j) {
      batch.inputs(i, j) = static_cast<std::int32_t>(rng.index(5));
      batch.targets(i, j) = static_cast<std::int32_t>(rng.index(5));
    }
  const double lambda = 0.3 + 0.4 * rng.uniform();

  // Evaluation point: a random alignment plus a little dense noise.
  const AlignmentMaps maps = AlignmentMaps::random(c, rng);
  std::vector<Matrix> inputs = {maps.o + 0.05 * rng.normal_matrix(c.d_model, c.d_model)};
  for (const Permutation& p : maps.ffn) inputs.push_back(p.matrix() + 0.05 * rng.normal_matrix(c.d_ff, c.d_ff));
  for (const SemiPermutation& h : maps.heads) inputs.push_back(h.matrix() + 0.05 * rng.normal_matrix(c.heads, c.heads));

  const Builder objective = [&](ad::Tape& tape, const std::vector<ad::Var>& x) {
    const ParamVars va = to_vars(tape, a, false), vb = to_vars(tape, b, false);
    const std::vector<ad::Var> ffn(x.begin() + 1, x.begin() + 1 + c.layers);
    const std::vector<ad::Var> heads(x.begin() + 1 + c.layers, x.end());
    return mixture_loss({va, align(vb, x[0], ffn, heads, c)}, {lambda, 1.0 - lambda}, c, batch, space);
  };
  return gradcheck(inputs, objective, seed);
}

}  // namespace rebasin::testing
