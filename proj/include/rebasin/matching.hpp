#pragma once

// Alignment estimators. Every estimator returns maps π with π(θ_B) ≈ θ_A in
// the sense of its criterion: weight similarity, activation correlation, or
// the task loss of the interpolated model.

#include "rebasin/autodiff.hpp"
#include "rebasin/model_graph.hpp"
#include "rebasin/symmetry.hpp"

#include <functional>
#include <string>
#include <vector>

namespace rebasin {

enum class MatchMethod { vanilla, weight, activation, learned, soft };
enum class LambdaSampler { fixed_half, uniform_narrow, uniform_full, gaussian };
enum class MatchInit { weight_matching, identity, random };

const char* to_string(MatchMethod m);
const char* to_string(LambdaSampler s);
const char* to_string(MatchInit i);
MatchMethod parse_method(const std::string& s);
LambdaSampler parse_sampler(const std::string& s);
MatchInit parse_init(const std::string& s);

struct MatchConfig {
  MatchMethod method = MatchMethod::weight;
  Index wm_iterations = 5;
  Index learn_iterations = 200;
  double lr = 1e-3;
  LambdaSampler sampler = LambdaSampler::uniform_narrow;
  int sinkhorn_iters = 50;
  MatchInit init = MatchInit::weight_matching;
  double noise = 0.0;  // ε of the soft-permutation initialization
  std::uint64_t seed = 0;
  Index log_every = 0;  // learned/soft: invoke the progress callback every n steps
  HeadSpace head_space = HeadSpace::circuits;  // how the interpolated model mixes heads

  void validate() const;
};

/// λ from the configured sampler, clamped to [0, 1].
double sample_lambda(LambdaSampler sampler, Rng& rng);

struct MatchResult {
  AlignmentMaps maps;
  std::vector<double> objective;  // weight matching: ⟨θ_A, π(θ_B)⟩ after each sweep
  Index sweeps = 0;
  bool converged = false;
  std::vector<std::string> warnings;
};

/// ⟨θ_A, θ_B⟩ summed over all tensors.
double inner_product(const TransformerParams& a, const TransformerParams& b);

/// Block coordinate ascent: FFN permutations, head permutations (QK/OV
/// circuit cost), then the residual map by Procrustes. Stops after
/// `iterations` sweeps or once no permutation changes. Models must be absorbed.
MatchResult weight_match(const TransformerParams& a, const TransformerParams& b, const TransformerConfig& config,
                         Index iterations = 5);

/// Correlation stand-in: FFN neurons by post-activation correlation, heads by
/// attention-pattern correlation, residual map by Procrustes on residual
/// activations at every layer boundary.
MatchResult activation_match(const TransformerParams& a, const TransformerParams& b,
                             const TransformerConfig& config, const std::vector<Batch>& probe);

/// Unconstrained latents projected onto the symmetry classes each step.
struct LatentAlignment {
  Matrix z_o;
  std::vector<Matrix> z_ff;
  std::vector<Matrix> z_h;

  static LatentAlignment from_maps(const AlignmentMaps& maps);
  /// ProjOrth(z_o), ProjPerm(z_ff), ProjPerm(z_h).
  AlignmentMaps project() const;
  /// z_o, then z_ff per layer, then z_h per layer.
  std::vector<Matrix> flatten() const;
  void assign(const std::vector<Matrix>& tensors);
};

/// Dense alignment variables on a tape.
struct MapVars {
  ad::Var o;
  std::vector<ad::Var> ffn;
  std::vector<ad::Var> heads;
};

MapVars map_leaves(ad::Tape& tape, const AlignmentMaps& maps, bool requires_grad);
ParamVars align(const ParamVars& params, const MapVars& maps, const TransformerConfig& config);

/// Called every `log_every` steps with the current projected maps.
using MatchProgress = std::function<void(Index step, const AlignmentMaps& maps)>;

/// Learned matching with straight-through gradients through both projections.
MatchResult learned_match(const TransformerParams& a, const TransformerParams& b, const TransformerConfig& config,
                          const std::vector<Batch>& data, const MatchConfig& match,
                          const MatchProgress& progress = {});

/// Doubly stochastic maps; o stays orthogonal.
struct SoftMaps {
  Matrix o;
  std::vector<Matrix> ffn;
  std::vector<Matrix> heads;
};

struct SoftMatchResult {
  SoftMaps soft;
  AlignmentMaps hard;             // Hungarian rounding of the soft maps
  double endpoint_deviation = 0;  // max |f[π_soft(θ_B)] − f[θ_B]| on the first data batch
  std::vector<std::string> warnings;
};

/// π applied with dense (possibly soft) maps.
TransformerParams apply_soft_alignment(const TransformerParams& params, const TransformerConfig& config,
                                       const SoftMaps& maps);

/// Sinkhorn-parameterized matching: P = sinkhorn(exp(Z), K), gradients flow
/// through exp and the normalization; the residual map uses the STE.
SoftMatchResult soft_learned_match(const TransformerParams& a, const TransformerParams& b,
                                   const TransformerConfig& config, const std::vector<Batch>& data,
                                   const MatchConfig& match, const MatchProgress& progress = {});

struct AngleReport {
  std::vector<double> angles_wm;
  std::vector<double> angles_diff;  // spectrum of O_diff = O_LM·O_WMᵀ
  double resultant_wm = 0.0;        // mean resultant length |mean e^{iθ}|
  double resultant_diff = 0.0;
  double mean_cos_wm = 0.0;         // concentration near angle 0
  double mean_cos_diff = 0.0;
};

AngleReport orthogonal_diff_analysis(const Matrix& o_wm, const Matrix& o_lm);

/// Dispatches on `match.method`; vanilla returns identity maps. Soft returns
/// its hard rounding.
MatchResult match_models(const TransformerParams& a, const TransformerParams& b, const TransformerConfig& config,
                         const std::vector<Batch>& data, const MatchConfig& match);

}  // namespace rebasin
