#pragma once

// Multi-model alignment through a shared, evolving anchor ("universe").

#include "rebasin/barrier.hpp"
#include "rebasin/matching.hpp"

#include <functional>
#include <vector>

namespace rebasin {

struct Universe {
  TransformerParams u;
  std::vector<AlignmentMaps> maps;  // π_m with π_m(θ_m) ≈ u
  Index iteration = 0;
  bool converged = false;
  std::vector<double> multi_barrier;  // per iteration, when logging data was given
  std::vector<double> refine_objective;
};

/// π_m(θ_m) for every model.
std::vector<TransformerParams> aligned_models(const std::vector<TransformerParams>& models,
                                              const TransformerConfig& config, const Universe& universe);

struct UniverseConfig {
  std::size_t seed_index = 0;
  Index iterations = 3;
  MatchMethod method = MatchMethod::weight;  // weight or activation
  Index wm_iterations = 5;
  Index log_samples = 8;  // Dirichlet draws for the per-iteration multi-barrier
  HeadSpace head_space = HeadSpace::circuits;
  std::uint64_t seed = 0;
};

/// U⁰ = θ_s; each iteration aligns every model to U and sets U to the mean of
/// the aligned models. `data` is the activation probe and the logging split;
/// it may be empty for weight matching.
Universe universe_match(const std::vector<TransformerParams>& models, const TransformerConfig& config,
                        const std::vector<Batch>& data, const UniverseConfig& uc = {});

struct RefineConfig {
  Index iterations = 200;
  double alpha = 0.1;  // Dirichlet concentration of the mixture weights
  double lr = 1e-2;
  std::uint64_t seed = 0;
  Index log_every = 0;
  HeadSpace head_space = HeadSpace::circuits;
};

using RefineProgress = std::function<void(Index step, double objective)>;

/// Joint learned refinement of every π_m: per step λ ~ Dirichlet(α·1) and the
/// objective is CE(Σ λ_m·π_m(θ_m)) − Σ λ_m·L_m, with straight-through
/// gradients into each model's latents. U becomes the mean of the refined models.
Universe learned_refine(const Universe& universe, const std::vector<TransformerParams>& models,
                        const TransformerConfig& config, const std::vector<Batch>& data, const RefineConfig& rc = {},
                        const RefineProgress& progress = {});

}  // namespace rebasin
