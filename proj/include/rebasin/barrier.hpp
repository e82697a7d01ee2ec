#pragma once

// Linear-path loss barriers between two models and over the simplex of M models.

#include "rebasin/model_graph.hpp"

#include <string>
#include <vector>

namespace rebasin {

/// λ·a + (1−λ)·b for every tensor; λ = 1 and λ = 0 return a and b exactly.
TransformerParams interpolate(const TransformerParams& a, const TransformerParams& b, double lambda);

/// Σ_m w_m·models[m]; a one-hot weight vector returns that model exactly.
TransformerParams mix(const std::vector<TransformerParams>& models, const std::vector<double>& weights);

struct Merged {
  TransformerParams params;
  TransformerConfig config;
};

/// Σ w_m·θ_m. In circuit space the result has wider heads (see
/// `mix_circuits`). One-hot weights return that model unchanged.
Merged merge_models(const std::vector<TransformerParams>& models, const std::vector<double>& weights,
                    const TransformerConfig& config, HeadSpace space = HeadSpace::circuits);

struct BarrierReport {
  std::vector<double> lambdas;  // uniform grid over [0, 1], endpoints included
  std::vector<double> losses;
  std::vector<double> accuracies;
  double loss_a = 0.0;  // λ = 1
  double loss_b = 0.0;  // λ = 0
  /// max over the grid of loss(λ) − (λ·L_A + (1−λ)·L_B); not clamped at 0.
  double barrier = 0.0;
  double midpoint_loss = 0.0;  // loss at the grid point closest to λ = 0.5
};

/// `threads` > 1 evaluates grid points concurrently; results do not depend on it.
BarrierReport barrier(const TransformerParams& a, const TransformerParams& b, const TransformerConfig& config,
                      const std::vector<Batch>& data, Index grid = 25, HeadSpace space = HeadSpace::circuits,
                      int threads = 1);

enum class SimplexMode { uniform_simplex, grid };

struct SimplexPoint {
  std::vector<double> weights;
  std::string kind;  // vertex, edge-midpoint, centroid, sample, grid
  double loss = 0.0;
  double deviation = 0.0;  // loss − Σ w_m·L_m
};

struct SimplexReport {
  std::vector<double> endpoint_losses;
  std::vector<SimplexPoint> points;
  double barrier = 0.0;  // max deviation
  double centroid_deviation = 0.0;
};

/// uniform_simplex: vertices, edge midpoints, centroid and `samples`
/// Dirichlet(1) draws. grid: every barycentric point with denominator `samples`.
SimplexReport multi_barrier(const std::vector<TransformerParams>& models, const TransformerConfig& config,
                            const std::vector<Batch>& data, Index samples = 32,
                            SimplexMode mode = SimplexMode::uniform_simplex, std::uint64_t seed = 0,
                            HeadSpace space = HeadSpace::circuits, int threads = 1);

std::string to_csv(const BarrierReport& r);
std::string to_json(const BarrierReport& r);
std::string to_csv(const SimplexReport& r);
std::string to_json(const SimplexReport& r);

}  // namespace rebasin
