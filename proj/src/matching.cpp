#include "rebasin/matching.hpp"

#include "rebasin/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>

namespace rebasin {

const char* to_string(MatchMethod m) {
  switch (m) {
    case MatchMethod::vanilla: return "vanilla";
    case MatchMethod::weight: return "weight";
    case MatchMethod::activation: return "activation";
    case MatchMethod::learned: return "learned";
    case MatchMethod::soft: return "soft";
  }
  return "?";
}

const char* to_string(LambdaSampler s) {
  switch (s) {
    case LambdaSampler::fixed_half: return "fixed-0.5";
    case LambdaSampler::uniform_narrow: return "uniform-0.4-0.6";
    case LambdaSampler::uniform_full: return "uniform-0-1";
    case LambdaSampler::gaussian: return "gaussian-0.5-0.1";
  }
  return "?";
}

const char* to_string(MatchInit i) {
  switch (i) {
    case MatchInit::weight_matching: return "weight-matching";
    case MatchInit::identity: return "identity";
    case MatchInit::random: return "random";
  }
  return "?";
}

MatchMethod parse_method(const std::string& s) {
  for (auto m : {MatchMethod::vanilla, MatchMethod::weight, MatchMethod::activation, MatchMethod::learned,
                 MatchMethod::soft})
    if (s == to_string(m)) return m;
  throw ConfigError("unknown method '" + s + "' (expected vanilla, weight, activation, learned or soft)");
}

LambdaSampler parse_sampler(const std::string& s) {
  for (auto m : {LambdaSampler::fixed_half, LambdaSampler::uniform_narrow, LambdaSampler::uniform_full,
                 LambdaSampler::gaussian})
    if (s == to_string(m)) return m;
  throw ConfigError("unknown lambda sampler '" + s + "'");
}

MatchInit parse_init(const std::string& s) {
  for (auto m : {MatchInit::weight_matching, MatchInit::identity, MatchInit::random})
    if (s == to_string(m)) return m;
  throw ConfigError("unknown init '" + s + "' (expected weight-matching, identity or random)");
}

void MatchConfig::validate() const {
  if (wm_iterations < 1) throw ConfigError("wm_iterations must be >= 1");
  if (learn_iterations < 0) throw ConfigError("learn_iterations must be >= 0");
  if (!(lr > 0.0)) throw ConfigError("lr must be > 0");
  if (sinkhorn_iters < 1) throw ConfigError("sinkhorn_iters must be >= 1");
  if (noise < 0.0) throw ConfigError("noise must be >= 0");
  if (log_every < 0) throw ConfigError("log_every must be >= 0");
}

double sample_lambda(LambdaSampler sampler, Rng& rng) {
  switch (sampler) {
    case LambdaSampler::fixed_half: return 0.5;
    case LambdaSampler::uniform_narrow: return rng.uniform(0.4, 0.6);
    case LambdaSampler::uniform_full: return rng.uniform();
    case LambdaSampler::gaussian: return std::clamp(rng.normal(0.5, 0.1), 0.0, 1.0);
  }
  return 0.5;
}

double inner_product(const TransformerParams& a, const TransformerParams& b) {
  const auto ta = flatten(a), tb = flatten(b);
  require(ta.size() == tb.size(), "inner_product: tensor count mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < ta.size(); ++i) {
    require(ta[i].rows() == tb[i].rows() && ta[i].cols() == tb[i].cols(), "inner_product: shape mismatch");
    s += ta[i].cwiseProduct(tb[i]).sum();
  }
  return s;
}

namespace {

void require_matchable(const TransformerParams& a, const TransformerParams& b, const TransformerConfig& config) {
  check_shapes(a, config);
  check_shapes(b, config);
  if (!is_absorbed(a, config) || !is_absorbed(b, config))
    throw ContractViolation("matching needs rmsnorm models with unit scales; run absorb_layernorm first");
}

AlignmentMaps with_o(const TransformerConfig& config, const Matrix& o) {
  AlignmentMaps m = AlignmentMaps::identity(config);
  m.o = o;
  return m;
}

AlignmentMaps with_perms(const AlignmentMaps& maps, const TransformerConfig& config) {
  AlignmentMaps m = maps;
  m.o = Matrix::Identity(config.d_model, config.d_model);
  return m;
}

// Residual-facing blocks, one residual vector per row. ⟨R_A, R_B·O⟩ is the
// O-dependent part of ⟨θ_A, π(θ_B)⟩.
Matrix residual_stack(const TransformerParams& p, bool invariant_only) {
  std::vector<Matrix> owned;
  owned.reserve(4 * p.layers.size() + 3);
  auto add = [&](Matrix m) { owned.push_back(std::move(m)); };
  add(p.token_embedding);
  add(p.position_embedding);
  add(p.unembedding);
  for (const LayerParams& l : p.layers) {
    add(l.bo.transpose());
    add(l.b2.transpose());
    if (invariant_only) continue;
    add(l.wq);
    add(l.wk);
    add(l.wv);
    add(l.wo.transpose());
    add(l.w1);
    add(l.w2.transpose());
  }
  Index rows = 0;
  for (const Matrix& m : owned) rows += m.rows();
  Matrix r(rows, p.token_embedding.cols());
  Index at = 0;
  for (const Matrix& m : owned) {
    r.middleRows(at, m.rows()) = m;
    at += m.rows();
  }
  return r;
}

// Head circuits with the bias folded in as a homogeneous coordinate:
// QK = [Wq bq]ᵀ[Wk bk], OV = Wo·[Wv bv].
struct Circuits {
  std::vector<Matrix> qk, ov;
};

Circuits head_circuits(const LayerParams& x, const TransformerConfig& c) {
  const Index dk = c.d_head, d = c.d_model;
  Circuits out;
  for (Index h = 0; h < c.heads; ++h) {
    Matrix q(dk, d + 1), k(dk, d + 1), v(dk, d + 1);
    q << x.wq.middleRows(h * dk, dk), x.bq.segment(h * dk, dk);
    k << x.wk.middleRows(h * dk, dk), x.bk.segment(h * dk, dk);
    v << x.wv.middleRows(h * dk, dk), x.bv.segment(h * dk, dk);
    out.qk.push_back(q.transpose() * k);
    out.ov.push_back(x.wo.middleCols(h * dk, dk) * v);
  }
  return out;
}

Permutation match_heads(const LayerParams& a, const LayerParams& b, const TransformerConfig& c) {
  const Circuits ca = head_circuits(a, c), cb = head_circuits(b, c);
  Matrix cost(c.heads, c.heads);
  for (Index i = 0; i < c.heads; ++i)
    for (Index j = 0; j < c.heads; ++j)
      cost(i, j) = (ca.qk[static_cast<std::size_t>(j)] - cb.qk[static_cast<std::size_t>(i)]).squaredNorm() +
                   (ca.ov[static_cast<std::size_t>(j)] - cb.ov[static_cast<std::size_t>(i)]).squaredNorm();
  return linear_assignment(cost, false).perm;
}

Permutation match_ffn(const LayerParams& a, const LayerParams& b) {
  // Source neuron i of B, destination j of A.
  const Matrix gain = b.w1 * a.w1.transpose() + b.b1 * a.b1.transpose() + b.w2.transpose() * a.w2;
  return linear_assignment(gain, true).perm;
}

bool same_perms(const AlignmentMaps& x, const AlignmentMaps& y) {
  return x.ffn == y.ffn && x.heads == y.heads;
}

}  // namespace

MatchResult weight_match(const TransformerParams& a, const TransformerParams& b, const TransformerConfig& config,
                         Index iterations) {
  require_matchable(a, b, config);
  require(iterations >= 1, "weight_match: iterations must be >= 1");
  MatchResult result;
  AlignmentMaps maps = AlignmentMaps::identity(config);
  maps.o = procrustes(residual_stack(a, true), residual_stack(b, true));
  for (Index sweep = 0; sweep < iterations; ++sweep) {
    const AlignmentMaps previous = maps;
    const TransformerParams b_rot = apply_alignment(b, config, with_o(config, maps.o));
    for (std::size_t l = 0; l < a.layers.size(); ++l) maps.ffn[l] = match_ffn(a.layers[l], b_rot.layers[l]);
    // The circuit cost is blind to the inner product, so a head assignment is
    // only taken when it does not lower it.
    for (std::size_t l = 0; l < a.layers.size(); ++l) {
      AlignmentMaps trial = maps;
      trial.heads[l] = SemiPermutation::from_permutation(match_heads(a.layers[l], b_rot.layers[l], config));
      if (trial.heads[l] == maps.heads[l]) continue;
      if (inner_product(a, apply_alignment(b, config, trial)) >= inner_product(a, apply_alignment(b, config, maps)))
        maps = std::move(trial);
    }
    const TransformerParams b_perm = apply_alignment(b, config, with_perms(maps, config));
    maps.o = procrustes(residual_stack(a, false), residual_stack(b_perm, false));
    result.objective.push_back(inner_product(a, apply_alignment(b, config, maps)));
    result.sweeps = sweep + 1;
    if (sweep > 0 && same_perms(previous, maps)) {
      result.converged = true;
      break;
    }
  }
  result.maps = std::move(maps);
  return result;
}

namespace {

struct Traces {
  std::vector<Matrix> residual, ffn, patterns;  // per boundary / layer, rows = samples
};

// Pearson correlation between the columns of x (source) and y (destination).
Matrix column_correlation(const Matrix& x, const Matrix& y, bool& degenerate) {
  auto standardize = [&degenerate](const Matrix& m) {
    Matrix z = m.rowwise() - m.colwise().mean();
    for (Index j = 0; j < z.cols(); ++j) {
      const double n = z.col(j).norm();
      if (n > 1e-12 * std::sqrt(static_cast<double>(z.rows()))) {
        z.col(j) /= n;
      } else {
        z.col(j).setZero();
        degenerate = true;
      }
    }
    return z;
  };
  return standardize(x).transpose() * standardize(y);
}

// Attention patterns per head; each column holds one head's probabilities
// over all (sequence, query, key) triples.
Matrix attention_patterns(const Matrix& q, const Matrix& k, Index seq, const TransformerConfig& c) {
  const Index seqs = q.rows() / seq, dk = c.d_head;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  Matrix out(seqs * seq * seq, c.heads);
  for (Index h = 0; h < c.heads; ++h) {
    Index at = 0;
    for (Index s = 0; s < seqs; ++s) {
      Matrix scores = q.block(s * seq, h * dk, seq, dk) * k.block(s * seq, h * dk, seq, dk).transpose() * scale;
      for (Index i = 0; i < seq; ++i) {
        const Index visible = c.causal ? i + 1 : seq;
        const double m = scores.row(i).head(visible).maxCoeff();
        double total = 0.0;
        for (Index j = 0; j < seq; ++j) {
          scores(i, j) = j < visible ? std::exp(scores(i, j) - m) : 0.0;
          total += scores(i, j);
        }
        for (Index j = 0; j < seq; ++j) out(at++, h) = scores(i, j) / total;
      }
    }
  }
  return out;
}

Traces collect(const TransformerParams& p, const TransformerConfig& c, const std::vector<Batch>& probe) {
  std::vector<std::vector<Matrix>> residual(static_cast<std::size_t>(c.layers + 1)),
      ffn(static_cast<std::size_t>(c.layers)), patterns(static_cast<std::size_t>(c.layers));
  for (const Batch& batch : probe) {
    ad::Tape tape;
    ForwardTrace t;
    forward(to_vars(tape, p, false), c, batch.inputs, &t);
    for (std::size_t i = 0; i < t.residual.size(); ++i) residual[i].push_back(t.residual[i]);
    for (std::size_t l = 0; l < t.ffn_hidden.size(); ++l) {
      ffn[l].push_back(t.ffn_hidden[l]);
      patterns[l].push_back(attention_patterns(t.queries[l], t.keys[l], batch.inputs.cols(), c));
    }
  }
  auto stack = [](const std::vector<Matrix>& parts) {
    Index rows = 0;
    for (const Matrix& m : parts) rows += m.rows();
    Matrix out(rows, parts.front().cols());
    Index at = 0;
    for (const Matrix& m : parts) {
      out.middleRows(at, m.rows()) = m;
      at += m.rows();
    }
    return out;
  };
  Traces out;
  for (const auto& r : residual) out.residual.push_back(stack(r));
  for (const auto& f : ffn) out.ffn.push_back(stack(f));
  for (const auto& a : patterns) out.patterns.push_back(stack(a));
  return out;
}

}  // namespace

MatchResult activation_match(const TransformerParams& a, const TransformerParams& b,
                             const TransformerConfig& config, const std::vector<Batch>& probe) {
  require_matchable(a, b, config);
  Index tokens = 0;
  for (const Batch& batch : probe) tokens += batch.inputs.size();
  if (tokens < config.d_model)
    throw ContractViolation("activation_match: probe has " + std::to_string(tokens) + " tokens, needs at least d_model = " +
                            std::to_string(config.d_model) + " for a well-posed residual fit");
  const Traces ta = collect(a, config, probe), tb = collect(b, config, probe);
  MatchResult result;
  result.maps = AlignmentMaps::identity(config);
  bool degenerate = false;
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    result.maps.ffn[l] = linear_assignment(column_correlation(tb.ffn[l], ta.ffn[l], degenerate), true).perm;
    result.maps.heads[l] = SemiPermutation::from_permutation(
        linear_assignment(column_correlation(tb.patterns[l], ta.patterns[l], degenerate), true).perm);
  }
  Index rows = 0;
  for (const Matrix& r : ta.residual) rows += r.rows();
  Matrix ra(rows, config.d_model), rb(rows, config.d_model);
  Index at = 0;
  for (std::size_t i = 0; i < ta.residual.size(); ++i) {
    ra.middleRows(at, ta.residual[i].rows()) = ta.residual[i];
    rb.middleRows(at, tb.residual[i].rows()) = tb.residual[i];
    at += ta.residual[i].rows();
  }
  const Matrix cross = rb.transpose() * ra;
  if (cross.norm() <= 1e-12) {
    result.warnings.push_back("residual activations are zero; residual map left at identity");
  } else {
    result.maps.o = project_orthogonal(cross);
  }
  if (degenerate)
    result.warnings.push_back("constant unit activations in the probe; affected correlations set to 0 and ties "
                              "resolved to the lowest index");
  return result;
}

LatentAlignment LatentAlignment::from_maps(const AlignmentMaps& maps) {
  LatentAlignment z;
  z.z_o = maps.o;
  for (const Permutation& p : maps.ffn) z.z_ff.push_back(p.matrix());
  for (const SemiPermutation& h : maps.heads) z.z_h.push_back(h.matrix());
  return z;
}

AlignmentMaps LatentAlignment::project() const {
  AlignmentMaps m;
  m.o = project_orthogonal(z_o);
  for (const Matrix& z : z_ff) m.ffn.push_back(project_permutation(z));
  for (const Matrix& z : z_h) m.heads.push_back(SemiPermutation::from_permutation(project_permutation(z)));
  return m;
}

std::vector<Matrix> LatentAlignment::flatten() const {
  std::vector<Matrix> out{z_o};
  out.insert(out.end(), z_ff.begin(), z_ff.end());
  out.insert(out.end(), z_h.begin(), z_h.end());
  return out;
}

void LatentAlignment::assign(const std::vector<Matrix>& t) {
  require(t.size() == 1 + z_ff.size() + z_h.size(), "LatentAlignment::assign: tensor count mismatch");
  z_o = t[0];
  for (std::size_t l = 0; l < z_ff.size(); ++l) z_ff[l] = t[1 + l];
  for (std::size_t l = 0; l < z_h.size(); ++l) z_h[l] = t[1 + z_ff.size() + l];
}

MapVars map_leaves(ad::Tape& tape, const AlignmentMaps& maps, bool requires_grad) {
  MapVars v;
  v.o = tape.leaf(maps.o, requires_grad);
  for (const Permutation& p : maps.ffn) v.ffn.push_back(tape.leaf(p.matrix(), requires_grad));
  for (const SemiPermutation& h : maps.heads) v.heads.push_back(tape.leaf(h.matrix(), requires_grad));
  return v;
}

ParamVars align(const ParamVars& params, const MapVars& maps, const TransformerConfig& config) {
  return align(params, maps.o, maps.ffn, maps.heads, config);
}

namespace {

AlignmentMaps initial_maps(const TransformerParams& a, const TransformerParams& b, const TransformerConfig& config,
                           const MatchConfig& match) {
  switch (match.init) {
    case MatchInit::weight_matching: return weight_match(a, b, config, match.wm_iterations).maps;
    case MatchInit::identity: return AlignmentMaps::identity(config);
    case MatchInit::random: {
      Rng rng(match.seed ^ 0x9e3779b97f4a7c15ULL);
      return AlignmentMaps::random(config, rng);
    }
  }
  return AlignmentMaps::identity(config);
}

std::vector<Matrix> map_grads(const MapVars& v, const ad::Gradients& g) {
  std::vector<Matrix> out{g[v.o]};
  for (const auto& x : v.ffn) out.push_back(g[x]);
  for (const auto& x : v.heads) out.push_back(g[x]);
  return out;
}

double checked_loss(const ad::Var& l, Index step, std::uint64_t seed) {
  const double value = l.value()(0, 0);
  if (!std::isfinite(value))
    throw NumericError("matching objective is not finite at step " + std::to_string(step) + " (seed " +
                       std::to_string(seed) + ")");
  return value;
}

}  // namespace

MatchResult learned_match(const TransformerParams& a, const TransformerParams& b, const TransformerConfig& config,
                          const std::vector<Batch>& data, const MatchConfig& match, const MatchProgress& progress) {
  require_matchable(a, b, config);
  match.validate();
  require(!data.empty(), "learned_match: empty dataset");
  LatentAlignment z = LatentAlignment::from_maps(initial_maps(a, b, config, match));
  std::vector<Matrix> latents = z.flatten();
  ad::AdamState state;
  state.seed = match.seed;
  const ad::AdamConfig adam{.lr = match.lr};
  Rng rng(match.seed);
  for (Index step = 0; step < match.learn_iterations; ++step) {
    const AlignmentMaps maps = z.project();
    if (progress && match.log_every > 0 && step % match.log_every == 0) progress(step, maps);
    ad::Tape tape;
    const ParamVars va = to_vars(tape, a, false), vb = to_vars(tape, b, false);
    const MapVars mv = map_leaves(tape, maps, true);
    const double lambda = sample_lambda(match.sampler, rng);
    const ad::Var l = mixture_loss({va, align(vb, mv, config)}, {lambda, 1.0 - lambda}, config,
                                   data[static_cast<std::size_t>(step) % data.size()], match.head_space);
    checked_loss(l, step, match.seed);
    // Straight-through: gradients w.r.t. the projected maps update the latents.
    ad::adam_step(latents, map_grads(mv, tape.backward(l)), state, adam);
    z.assign(latents);
  }
  MatchResult result;
  result.maps = z.project();
  if (progress && match.log_every > 0) progress(match.learn_iterations, result.maps);
  return result;
}

TransformerParams apply_soft_alignment(const TransformerParams& params, const TransformerConfig& config,
                                       const SoftMaps& maps) {
  check_shapes(params, config);
  if (!is_absorbed(params, config))
    throw ContractViolation("apply_soft_alignment needs rmsnorm with unit scales; run absorb_layernorm first");
  ad::Tape tape;
  MapVars mv;
  mv.o = tape.constant(maps.o);
  for (const Matrix& p : maps.ffn) mv.ffn.push_back(tape.constant(p));
  for (const Matrix& h : maps.heads) mv.heads.push_back(tape.constant(h));
  return values_of(align(to_vars(tape, params, false), mv, config));
}

namespace {

ad::Var sinkhorn_var(const ad::Var& z, int iterations) {
  ad::Var p = ad::exp(z);
  for (int k = 0; k < iterations; ++k) p = ad::normalize_cols(ad::normalize_rows(p));
  return p;
}

// log(P + U(0, a)) with a = ε·σ·√3 and Xavier σ = √(2 / (n + n)).
Matrix soft_latent(const Matrix& p, double noise, Rng& rng) {
  const Index n = p.rows();
  const double sigma = std::sqrt(2.0 / static_cast<double>(n + n));
  const double a = noise * sigma * std::sqrt(3.0);
  Matrix z(n, n);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < n; ++j) z(i, j) = std::log(std::max(p(i, j) + a * rng.uniform(), 1e-12));
  return z;
}

Matrix soft_value(const Matrix& z, int iterations) {
  return sinkhorn_normalize(z.array().exp().matrix(), iterations);
}

}  // namespace

SoftMatchResult soft_learned_match(const TransformerParams& a, const TransformerParams& b,
                                   const TransformerConfig& config, const std::vector<Batch>& data,
                                   const MatchConfig& match, const MatchProgress& progress) {
  require_matchable(a, b, config);
  match.validate();
  require(!data.empty(), "soft_learned_match: empty dataset");
  const AlignmentMaps init = initial_maps(a, b, config, match);
  Rng rng(match.seed);
  LatentAlignment z;
  z.z_o = init.o;
  for (const Permutation& p : init.ffn) z.z_ff.push_back(soft_latent(p.matrix(), match.noise, rng));
  for (const SemiPermutation& h : init.heads) z.z_h.push_back(soft_latent(h.matrix(), match.noise, rng));
  std::vector<Matrix> latents = z.flatten();
  ad::AdamState state;
  state.seed = match.seed;
  const ad::AdamConfig adam{.lr = match.lr};

  auto current = [&]() {
    SoftMaps s;
    s.o = project_orthogonal(z.z_o);
    for (const Matrix& m : z.z_ff) s.ffn.push_back(soft_value(m, match.sinkhorn_iters));
    for (const Matrix& m : z.z_h) s.heads.push_back(soft_value(m, match.sinkhorn_iters));
    return s;
  };
  auto rounded = [&](const SoftMaps& s) {
    AlignmentMaps m;
    m.o = s.o;
    for (const Matrix& p : s.ffn) m.ffn.push_back(project_permutation(p));
    for (const Matrix& h : s.heads) m.heads.push_back(SemiPermutation::from_permutation(project_permutation(h)));
    return m;
  };

  for (Index step = 0; step < match.learn_iterations; ++step) {
    if (progress && match.log_every > 0 && step % match.log_every == 0) progress(step, rounded(current()));
    ad::Tape tape;
    const ParamVars va = to_vars(tape, a, false), vb = to_vars(tape, b, false);
    MapVars mv;
    mv.o = tape.leaf(project_orthogonal(z.z_o), true);
    std::vector<ad::Var> zf, zh;
    for (const Matrix& m : z.z_ff) {
      zf.push_back(tape.leaf(m, true));
      mv.ffn.push_back(sinkhorn_var(zf.back(), match.sinkhorn_iters));
    }
    for (const Matrix& m : z.z_h) {
      zh.push_back(tape.leaf(m, true));
      mv.heads.push_back(sinkhorn_var(zh.back(), match.sinkhorn_iters));
    }
    const double lambda = sample_lambda(match.sampler, rng);
    const ad::Var l = mixture_loss({va, align(vb, mv, config)}, {lambda, 1.0 - lambda}, config,
                                   data[static_cast<std::size_t>(step) % data.size()], match.head_space);
    checked_loss(l, step, match.seed);
    const ad::Gradients g = tape.backward(l);
    std::vector<Matrix> grads{g[mv.o]};
    for (const auto& v : zf) grads.push_back(g[v]);
    for (const auto& v : zh) grads.push_back(g[v]);
    ad::adam_step(latents, grads, state, adam);
    z.assign(latents);
  }

  SoftMatchResult result;
  result.soft = current();
  result.hard = rounded(result.soft);
  if (progress && match.log_every > 0) progress(match.learn_iterations, result.hard);
  const TransformerParams moved = apply_soft_alignment(b, config, result.soft);
  const TokenMatrix& probe = data.front().inputs;
  result.endpoint_deviation = (forward(moved, config, probe) - forward(b, config, probe)).cwiseAbs().maxCoeff();
  if (result.endpoint_deviation > 1e-6)
    result.warnings.push_back("soft maps are not function-preserving: endpoint logits move by " +
                              std::to_string(result.endpoint_deviation));
  return result;
}

AngleReport orthogonal_diff_analysis(const Matrix& o_wm, const Matrix& o_lm) {
  require(o_wm.rows() == o_lm.rows() && o_wm.cols() == o_lm.cols(),
          "orthogonal_diff_analysis: dimension mismatch " + shape_str(o_wm) + " vs " + shape_str(o_lm));
  AngleReport r;
  r.angles_wm = eigen_angles(o_wm);
  r.angles_diff = eigen_angles(Matrix(o_lm * o_wm.transpose()));
  auto stats = [](const std::vector<double>& angles, double& resultant, double& mean_cos) {
    std::complex<double> s = 0.0;
    for (double t : angles) s += std::polar(1.0, t);
    s /= static_cast<double>(angles.size());
    resultant = std::abs(s);
    mean_cos = s.real();
  };
  stats(r.angles_wm, r.resultant_wm, r.mean_cos_wm);
  stats(r.angles_diff, r.resultant_diff, r.mean_cos_diff);
  return r;
}

MatchResult match_models(const TransformerParams& a, const TransformerParams& b, const TransformerConfig& config,
                         const std::vector<Batch>& data, const MatchConfig& match) {
  match.validate();
  switch (match.method) {
    case MatchMethod::vanilla: {
      MatchResult r;
      r.maps = AlignmentMaps::identity(config);
      return r;
    }
    case MatchMethod::weight: return weight_match(a, b, config, match.wm_iterations);
    case MatchMethod::activation: return activation_match(a, b, config, data);
    case MatchMethod::learned: return learned_match(a, b, config, data, match);
    case MatchMethod::soft: {
      SoftMatchResult s = soft_learned_match(a, b, config, data, match);
      MatchResult r;
      r.maps = std::move(s.hard);
      r.warnings = std::move(s.warnings);
      return r;
    }
  }
  throw ContractViolation("match_models: unknown method");
}

}  // namespace rebasin
