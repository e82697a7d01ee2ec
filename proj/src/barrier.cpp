#include "rebasin/barrier.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <exception>
#include <functional>
#include <mutex>
#include <sstream>
#include <thread>

namespace rebasin {

TransformerParams interpolate(const TransformerParams& a, const TransformerParams& b, double lambda) {
  if (lambda == 1.0) return a;
  if (lambda == 0.0) return b;
  std::vector<Matrix> ta = flatten(a);
  const std::vector<Matrix> tb = flatten(b);
  require(ta.size() == tb.size(), "interpolate: tensor count mismatch");
  for (std::size_t i = 0; i < ta.size(); ++i) {
    require(ta[i].rows() == tb[i].rows() && ta[i].cols() == tb[i].cols(),
            "interpolate: shape mismatch " + shape_str(ta[i]) + " vs " + shape_str(tb[i]));
    ta[i] = lambda * ta[i] + (1.0 - lambda) * tb[i];
  }
  TransformerParams out = a;
  unflatten(out, ta);
  return out;
}

TransformerParams mix(const std::vector<TransformerParams>& models, const std::vector<double>& weights) {
  require(!models.empty() && models.size() == weights.size(), "mix: model/weight count mismatch");
  for (std::size_t m = 0; m < weights.size(); ++m) {
    if (weights[m] != 1.0) continue;
    bool one_hot = true;
    for (std::size_t k = 0; k < weights.size(); ++k) one_hot = one_hot && (k == m || weights[k] == 0.0);
    if (one_hot) return models[m];
  }
  std::vector<Matrix> acc = flatten(models.front());
  for (auto& t : acc) t *= weights.front();
  for (std::size_t m = 1; m < models.size(); ++m) {
    const std::vector<Matrix> t = flatten(models[m]);
    require(t.size() == acc.size(), "mix: tensor count mismatch");
    for (std::size_t i = 0; i < t.size(); ++i) {
      require(t[i].rows() == acc[i].rows() && t[i].cols() == acc[i].cols(), "mix: shape mismatch");
      acc[i] += weights[m] * t[i];
    }
  }
  TransformerParams out = models.front();
  unflatten(out, acc);
  return out;
}

Merged merge_models(const std::vector<TransformerParams>& models, const std::vector<double>& weights,
                    const TransformerConfig& config, HeadSpace space) {
  require(!models.empty() && models.size() == weights.size(), "merge_models: model/weight count mismatch");
  for (std::size_t m = 0; m < weights.size(); ++m) {
    bool one_hot = weights[m] == 1.0;
    for (std::size_t k = 0; k < weights.size() && one_hot; ++k) one_hot = k == m || weights[k] == 0.0;
    if (one_hot) return {models[m], config};
  }
  if (space == HeadSpace::weights) return {mix(models, weights), config};
  ad::Tape tape;
  std::vector<ParamVars> vars;
  for (const TransformerParams& m : models) vars.push_back(to_vars(tape, m, false));
  return {values_of(mix_circuits(vars, weights, config)), circuit_config(config, models.size())};
}

namespace {

// Runs f(i) for i in [0, n) on up to `threads` workers; rethrows the first error.
void parallel_for(Index n, int threads, const std::function<void(Index)>& f) {
  const int workers = static_cast<int>(std::min<Index>(std::max(threads, 1), n));
  if (workers <= 1) {
    for (Index i = 0; i < n; ++i) f(i);
    return;
  }
  std::exception_ptr error;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      for (Index i = w; i < n; i += workers) {
        try {
          f(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(mu);
          if (!error) error = std::current_exception();
          return;
        }
      }
    });
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace

BarrierReport barrier(const TransformerParams& a, const TransformerParams& b, const TransformerConfig& config,
                      const std::vector<Batch>& data, Index grid, HeadSpace space, int threads) {
  require(grid >= 3, "barrier: grid needs at least 3 points");
  if (data.empty()) throw ContractViolation("barrier: empty dataset");
  check_shapes(a, config);
  check_shapes(b, config);
  BarrierReport r;
  r.lambdas.resize(static_cast<std::size_t>(grid));
  r.losses.resize(r.lambdas.size());
  r.accuracies.resize(r.lambdas.size());
  for (Index i = 0; i < grid; ++i)
    r.lambdas[static_cast<std::size_t>(i)] = static_cast<double>(i) / static_cast<double>(grid - 1);
  parallel_for(grid, threads, [&](Index i) {
    const auto k = static_cast<std::size_t>(i);
    const double l = r.lambdas[k];
    const Merged m = merge_models({a, b}, {l, 1.0 - l}, config, space);
    const EvalResult e = evaluate(m.params, m.config, data);
    r.losses[k] = e.loss;
    r.accuracies[k] = e.accuracy;
  });
  r.loss_b = r.losses.front();
  r.loss_a = r.losses.back();
  r.barrier = -std::numeric_limits<double>::infinity();
  double best_mid = 2.0;
  for (std::size_t k = 0; k < r.lambdas.size(); ++k) {
    const double l = r.lambdas[k];
    r.barrier = std::max(r.barrier, r.losses[k] - (l * r.loss_a + (1.0 - l) * r.loss_b));
    if (std::abs(l - 0.5) < best_mid) {
      best_mid = std::abs(l - 0.5);
      r.midpoint_loss = r.losses[k];
    }
  }
  return r;
}

namespace {

void compositions(Index parts, Index total, std::vector<Index>& current, std::vector<std::vector<Index>>& out) {
  if (static_cast<Index>(current.size()) == parts - 1) {
    Index used = 0;
    for (Index c : current) used += c;
    current.push_back(total - used);
    out.push_back(current);
    current.pop_back();
    return;
  }
  Index used = 0;
  for (Index c : current) used += c;
  for (Index k = 0; k <= total - used; ++k) {
    current.push_back(k);
    compositions(parts, total, current, out);
    current.pop_back();
  }
}

}  // namespace

SimplexReport multi_barrier(const std::vector<TransformerParams>& models, const TransformerConfig& config,
                            const std::vector<Batch>& data, Index samples, SimplexMode mode, std::uint64_t seed,
                            HeadSpace space, int threads) {
  require(models.size() >= 2, "multi_barrier: needs at least two models");
  if (data.empty()) throw ContractViolation("multi_barrier: empty dataset");
  for (const auto& m : models) check_shapes(m, config);
  const std::size_t n = models.size();
  SimplexReport r;
  auto add = [&](std::vector<double> w, const char* kind) { r.points.push_back({std::move(w), kind, 0.0, 0.0}); };

  if (mode == SimplexMode::grid) {
    require(samples >= 1, "multi_barrier: grid resolution must be >= 1");
    std::vector<std::vector<Index>> comps;
    std::vector<Index> cur;
    compositions(static_cast<Index>(n), samples, cur, comps);
    for (const auto& c : comps) {
      std::vector<double> w(n);
      for (std::size_t m = 0; m < n; ++m) w[m] = static_cast<double>(c[m]) / static_cast<double>(samples);
      add(std::move(w), "grid");
    }
  } else {
    require(samples >= 0, "multi_barrier: negative sample count");
    for (std::size_t m = 0; m < n; ++m) {
      std::vector<double> w(n, 0.0);
      w[m] = 1.0;
      add(std::move(w), "vertex");
    }
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) {
        std::vector<double> w(n, 0.0);
        w[i] = w[j] = 0.5;
        add(std::move(w), "edge-midpoint");
      }
    add(std::vector<double>(n, 1.0 / static_cast<double>(n)), "centroid");
    Rng rng(seed);
    for (Index s = 0; s < samples; ++s) add(rng.dirichlet(n, 1.0), "sample");
  }

  r.endpoint_losses.resize(n);
  parallel_for(static_cast<Index>(n), threads, [&](Index m) {
    r.endpoint_losses[static_cast<std::size_t>(m)] = evaluate(models[static_cast<std::size_t>(m)], config, data).loss;
  });
  parallel_for(static_cast<Index>(r.points.size()), threads, [&](Index i) {
    SimplexPoint& p = r.points[static_cast<std::size_t>(i)];
    const Merged m = merge_models(models, p.weights, config, space);
    p.loss = evaluate(m.params, m.config, data).loss;
    double baseline = 0.0;
    for (std::size_t m = 0; m < n; ++m) baseline += p.weights[m] * r.endpoint_losses[m];
    p.deviation = p.loss - baseline;
  });
  r.barrier = -std::numeric_limits<double>::infinity();
  const double third = 1.0 / static_cast<double>(n);
  for (const SimplexPoint& p : r.points) {
    r.barrier = std::max(r.barrier, p.deviation);
    bool centroid = true;
    for (double w : p.weights) centroid = centroid && std::abs(w - third) < 1e-12;
    if (centroid) r.centroid_deviation = p.deviation;
  }
  return r;
}

std::string to_csv(const BarrierReport& r) {
  std::ostringstream os;
  os.precision(17);
  os << "lambda,loss,accuracy\n";
  for (std::size_t k = 0; k < r.lambdas.size(); ++k)
    os << r.lambdas[k] << ',' << r.losses[k] << ',' << r.accuracies[k] << '\n';
  return os.str();
}

std::string to_json(const BarrierReport& r) {
  nlohmann::json j;
  j["barrier"] = r.barrier;
  j["loss_a"] = r.loss_a;
  j["loss_b"] = r.loss_b;
  j["midpoint_loss"] = r.midpoint_loss;
  j["lambdas"] = r.lambdas;
  j["losses"] = r.losses;
  j["accuracies"] = r.accuracies;
  return j.dump(2);
}

std::string to_csv(const SimplexReport& r) {
  std::ostringstream os;
  os.precision(17);
  const std::size_t n = r.endpoint_losses.size();
  for (std::size_t m = 0; m < n; ++m) os << 'w' << m << ',';
  os << "kind,loss,deviation\n";
  for (const SimplexPoint& p : r.points) {
    for (double w : p.weights) os << w << ',';
    os << p.kind << ',' << p.loss << ',' << p.deviation << '\n';
  }
  return os.str();
}

std::string to_json(const SimplexReport& r) {
  nlohmann::json j;
  j["barrier"] = r.barrier;
  j["centroid_deviation"] = r.centroid_deviation;
  j["endpoint_losses"] = r.endpoint_losses;
  nlohmann::json pts = nlohmann::json::array();
  for (const SimplexPoint& p : r.points)
    pts.push_back({{"weights", p.weights}, {"kind", p.kind}, {"loss", p.loss}, {"deviation", p.deviation}});
  j["points"] = pts;
  return j.dump(2);
}

}  // namespace rebasin
