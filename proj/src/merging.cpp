#include "rebasin/merging.hpp"

#include "rebasin/model_graph.hpp"

#include <cmath>

namespace rebasin {

std::vector<TransformerParams> aligned_models(const std::vector<TransformerParams>& models,
                                              const TransformerConfig& config, const Universe& universe) {
  require(models.size() == universe.maps.size(), "aligned_models: model/map count mismatch");
  std::vector<TransformerParams> out;
  for (std::size_t m = 0; m < models.size(); ++m) out.push_back(apply_alignment(models[m], config, universe.maps[m]));
  return out;
}

namespace {

TransformerParams average(const std::vector<TransformerParams>& models) {
  return mix(models, std::vector<double>(models.size(), 1.0 / static_cast<double>(models.size())));
}

void require_mergeable(const std::vector<TransformerParams>& models, const TransformerConfig& config) {
  require(models.size() >= 2, "merging needs at least two models");
  for (std::size_t m = 0; m < models.size(); ++m) {
    try {
      check_shapes(models[m], config);
    } catch (const ContractViolation& e) {
      throw ContractViolation("model " + std::to_string(m) + " does not match the shared config: " + e.what());
    }
  }
}

}  // namespace

Universe universe_match(const std::vector<TransformerParams>& models, const TransformerConfig& config,
                        const std::vector<Batch>& data, const UniverseConfig& uc) {
  require_mergeable(models, config);
  require(uc.seed_index < models.size(), "universe_match: seed index out of range");
  require(uc.iterations >= 1, "universe_match: iterations must be >= 1");
  require(uc.method == MatchMethod::weight || uc.method == MatchMethod::activation,
          std::string("universe_match: unsupported align method '") + to_string(uc.method) + "'");
  if (uc.method == MatchMethod::activation && data.empty())
    throw ContractViolation("universe_match: activation matching needs probe data");

  Universe universe;
  universe.u = models[uc.seed_index];
  for (Index t = 1; t <= uc.iterations; ++t) {
    universe.maps.clear();
    for (const TransformerParams& model : models) {
      universe.maps.push_back(uc.method == MatchMethod::weight
                                  ? weight_match(universe.u, model, config, uc.wm_iterations).maps
                                  : activation_match(universe.u, model, config, data).maps);
    }
    const std::vector<TransformerParams> aligned = aligned_models(models, config, universe);
    TransformerParams next = average(aligned);
    const double moved = max_abs_diff(next, universe.u);
    universe.u = std::move(next);
    universe.iteration = t;
    if (!data.empty())
      universe.multi_barrier.push_back(
          multi_barrier(aligned, config, data, uc.log_samples, SimplexMode::uniform_simplex, uc.seed,
                        uc.head_space)
              .barrier);
    if (moved < 1e-9) {
      universe.converged = true;
      break;
    }
  }
  return universe;
}

Universe learned_refine(const Universe& universe, const std::vector<TransformerParams>& models,
                        const TransformerConfig& config, const std::vector<Batch>& data, const RefineConfig& rc,
                        const RefineProgress& progress) {
  require_mergeable(models, config);
  require(universe.maps.size() == models.size(), "learned_refine: universe has a different model count");
  require(!data.empty(), "learned_refine: empty dataset");
  require(rc.alpha > 0.0, "learned_refine: alpha must be > 0");
  for (const AlignmentMaps& m : universe.maps) m.validate(config);

  const std::size_t n = models.size();
  // Endpoint losses are invariant under the exact maps, so cache them per batch.
  std::vector<std::vector<double>> endpoint(n, std::vector<double>(data.size()));
  for (std::size_t m = 0; m < n; ++m)
    for (std::size_t b = 0; b < data.size(); ++b) endpoint[m][b] = evaluate(models[m], config, {data[b]}).loss;

  std::vector<LatentAlignment> latents;
  std::vector<Matrix> flat;
  std::vector<std::size_t> offset;
  for (const AlignmentMaps& maps : universe.maps) {
    latents.push_back(LatentAlignment::from_maps(maps));
    offset.push_back(flat.size());
    for (Matrix& z : latents.back().flatten()) flat.push_back(std::move(z));
  }
  const std::size_t per_model = flat.size() / n;

  ad::AdamState state;
  state.seed = rc.seed;
  const ad::AdamConfig adam{.lr = rc.lr};
  Rng rng(rc.seed);
  Universe out = universe;
  for (Index step = 0; step < rc.iterations; ++step) {
    const std::size_t b = static_cast<std::size_t>(step) % data.size();
    const std::vector<double> lambda = rng.dirichlet(n, rc.alpha);
    ad::Tape tape;
    std::vector<MapVars> mvs;
    std::vector<ParamVars> aligned;
    double baseline = 0.0;
    for (std::size_t m = 0; m < n; ++m) {
      mvs.push_back(map_leaves(tape, latents[m].project(), true));
      aligned.push_back(align(to_vars(tape, models[m], false), mvs.back(), config));
      baseline += lambda[m] * endpoint[m][b];
    }
    const ad::Var ce = mixture_loss(aligned, lambda, config, data[b], rc.head_space);
    const double objective = ce.value()(0, 0) - baseline;
    if (!std::isfinite(objective))
      throw NumericError("learned_refine: objective is not finite at step " + std::to_string(step) + " (seed " +
                         std::to_string(rc.seed) + ")");
    out.refine_objective.push_back(objective);
    if (progress && rc.log_every > 0 && step % rc.log_every == 0) progress(step, objective);

    const ad::Gradients g = tape.backward(ce);
    std::vector<Matrix> grads;
    for (const MapVars& mv : mvs) {
      grads.push_back(g[mv.o]);
      for (const auto& x : mv.ffn) grads.push_back(g[x]);
      for (const auto& x : mv.heads) grads.push_back(g[x]);
    }
    ad::adam_step(flat, grads, state, adam);
    for (std::size_t m = 0; m < n; ++m)
      latents[m].assign(std::vector<Matrix>(flat.begin() + static_cast<std::ptrdiff_t>(offset[m]),
                                            flat.begin() + static_cast<std::ptrdiff_t>(offset[m] + per_model)));
  }
  for (std::size_t m = 0; m < n; ++m) out.maps[m] = latents[m].project();
  out.u = average(aligned_models(models, config, out));
  return out;
}

}  // namespace rebasin
