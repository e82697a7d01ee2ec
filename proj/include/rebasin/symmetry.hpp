#pragma once

// Function-preserving reparameterizations of the transformer.
//
// A residual map O changes the residual basis as r' = Oᵀ·r. With column-vector
// weights that means readers of the residual stream pick up ·O on the right,
// writers pick up Oᵀ· on the left, and stored residual rows (embeddings,
// unembedding) are multiplied by O on the right.

#include "rebasin/common.hpp"
#include "rebasin/permutation.hpp"
#include "rebasin/transformer.hpp"

#include <string>
#include <variant>
#include <vector>

namespace rebasin {

/// Sparse column-stochastic M x N map with at most one positive entry per row.
/// Row j either feeds from column `source` with `weight`, or is unused.
class SemiPermutation {
 public:
  struct Entry {
    Index source = -1;  // -1: unused row
    double weight = 0.0;
  };

  SemiPermutation() = default;
  SemiPermutation(Index cols, std::vector<Entry> rows);

  static SemiPermutation from_permutation(const Permutation& p);
  /// Every column gets at least one row; surplus rows split a random column
  /// with Dirichlet(1) weights.
  static SemiPermutation random(Index rows, Index cols, Rng& rng);

  Index rows() const { return static_cast<Index>(entries_.size()); }
  Index cols() const { return cols_; }
  const std::vector<Entry>& entries() const { return entries_; }
  const Entry& operator[](Index row) const { return entries_[static_cast<std::size_t>(row)]; }

  Matrix matrix() const;
  /// Same pattern with every positive weight replaced by 1.
  Matrix support() const;
  bool is_permutation() const;
  Permutation to_permutation() const;

  friend bool operator==(const SemiPermutation& a, const SemiPermutation& b);

 private:
  Index cols_ = 0;
  std::vector<Entry> entries_;
};

/// Throws InvariantViolation unless OᵀO = I within `tol`. Returns `o`.
Matrix checked_orthogonal(Matrix o, double tol = 1e-10);

struct AlignmentMaps {
  Matrix o;                           // d_model x d_model
  std::vector<Permutation> ffn;       // per layer, d_ff
  std::vector<SemiPermutation> heads; // per layer, heads x heads

  static AlignmentMaps identity(const TransformerConfig& config);
  static AlignmentMaps random(const TransformerConfig& config, Rng& rng, bool orthogonal = true);

  void validate(const TransformerConfig& config) const;
  /// Requires hard head permutations.
  AlignmentMaps inverse() const;
  /// Maps equivalent to applying `this` first and then `next`.
  AlignmentMaps then(const AlignmentMaps& next) const;
};

/// θ' = π(θ). Requires rmsnorm with unit scales; run `absorb_layernorm` first.
TransformerParams apply_alignment(const TransformerParams& params, const TransformerConfig& config,
                                  const AlignmentMaps& maps);

/// Reindexes heads by `p` (M x N). Destination head j fed by source i gets
/// Q/K/V verbatim and `weight`·W_o. Unused destinations get W_o = 0.
/// `config` describes the source layer; the result has M heads.
LayerParams head_mix(const LayerParams& layer, const TransformerConfig& config,
                     const SemiPermutation& p);

/// FFN neuron splitting: W1' = P̃·W1, b1' = P̃·b1, W2' = W2·supp(P̃)ᵀ.
/// Exact only for positively homogeneous activations, so relu is required.
LayerParams ffn_mix(const LayerParams& layer, const TransformerConfig& config,
                    const SemiPermutation& p);

/// Applies head_mix / ffn_mix to every layer and updates the config.
std::pair<TransformerParams, TransformerConfig> widen_heads(
    const TransformerParams& params, const TransformerConfig& config,
    const std::vector<SemiPermutation>& maps);
std::pair<TransformerParams, TransformerConfig> widen_ffn(
    const TransformerParams& params, const TransformerConfig& config,
    const std::vector<SemiPermutation>& maps);

struct Absorbed {
  TransformerParams params;
  TransformerConfig config;
  bool changed = false;
};

/// Rewrites a LayerNorm (or scaled RMSNorm) model as an equivalent RMSNorm
/// model with unit scales. Residual writers are centered so the stream is
/// always mean-free; norm scales and offsets fold into the following reads.
Absorbed absorb_layernorm(const TransformerParams& params, const TransformerConfig& config);

/// True when the model is rmsnorm with all scales exactly 1.
bool is_absorbed(const TransformerParams& params, const TransformerConfig& config);

/// Widens the residual stream from N to M with a column-orthonormal M x N map:
/// r' = O·r, readers W·Oᵀ·c with c = √(N/M), eps_M = (N/M)·eps_N.
std::pair<TransformerParams, TransformerConfig> expand_width(const TransformerParams& params,
                                                             const TransformerConfig& config,
                                                             const Matrix& o);

/// Positive rescaling inside each head so that ‖W_q‖ = ‖W_k‖ and
/// ‖W_v‖ = ‖W_o‖ per head. Leaves QK and OV circuits unchanged.
TransformerParams canonicalize_heads(const TransformerParams& params, const TransformerConfig& config);

enum class SymmetryClass { permutation, semi_permutation, orthogonal, invertible };

using Transformation = std::variant<Permutation, SemiPermutation, Matrix>;

/// Seeded member of a symmetry class. `rows` is ignored for square classes.
Transformation random_symmetry(SymmetryClass cls, Index rows, Index cols, std::uint64_t seed);

/// Maps file: magic "RBMP0001", u64 record count, then tagged records
/// PERM (u64 n, n x u64 indices), SEMI (u64 rows, u64 cols, u64 count,
/// count x (u64 row, u64 col, f64 weight)), ORTH (u64 rows, u64 cols, f64
/// row-major). Records are o, then per layer the FFN and head maps.
void save_maps(const AlignmentMaps& maps, const std::string& path);
AlignmentMaps load_maps(const std::string& path);

}  // namespace rebasin
