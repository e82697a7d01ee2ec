#pragma once

// Transformer parameters as autodiff variables. Bias, scale and offset
// vectors live on the tape as 1 x n rows; activations are row-per-token.

#include "rebasin/autodiff.hpp"
#include "rebasin/transformer.hpp"

#include <string>
#include <vector>

namespace rebasin {

struct NormVars {
  ad::Var scale;
  ad::Var offset;  // invalid for rmsnorm
};

struct LayerVars {
  NormVars norm1;
  ad::Var wq, wk, wv, bq, bk, bv, wo, bo;
  NormVars norm2;
  ad::Var w1, b1, w2, b2;
};

struct ParamVars {
  ad::Var token_embedding, position_embedding;
  std::vector<LayerVars> layers;
  NormVars final_norm;
  ad::Var unembedding, unembedding_bias;
};

/// Places every tensor on the tape as a leaf.
ParamVars to_vars(ad::Tape& tape, const TransformerParams& params, bool requires_grad);

/// Reads gradients for the leaves created by `to_vars` back into parameter form.
TransformerParams gradients_of(const ParamVars& vars, const ad::Gradients& grads);

/// Current values of the variables in parameter form.
TransformerParams values_of(const ParamVars& vars);

/// λ·a + (1−λ)·b for every tensor.
ParamVars interpolate(const ParamVars& a, const ParamVars& b, double lambda);

/// Σ_m w_m·models[m] for every tensor.
ParamVars mix(const std::vector<ParamVars>& models, const std::vector<double>& weights);

/// How attention heads are combined when models are mixed. `circuits` mixes
/// each head's QK and OV circuits; `weights` mixes Wq, Wk, Wv, Wo entrywise,
/// which also mixes the intra-head bases.
enum class HeadSpace { circuits, weights };

const char* to_string(HeadSpace s);
HeadSpace parse_head_space(const std::string& s);

/// Config of a circuit-space mixture of `count` models: d_head grows to
/// count·d_head so every source head keeps its own block.
TransformerConfig circuit_config(const TransformerConfig& config, std::size_t count);

/// Σ w_m·θ_m with heads mixed in circuit space: head h of the result has
/// QK = Σ w_m·QK_m(h) and OV = Σ w_m·OV_m(h) (bias-augmented). Every other
/// tensor is mixed entrywise. Evaluate with `circuit_config(config, M)`.
ParamVars mix_circuits(const std::vector<ParamVars>& models, const std::vector<double>& weights,
                       const TransformerConfig& config);

/// Dense-matrix alignment: residual map `o` (d_model x d_model), per-layer FFN
/// maps (d_ff x d_ff) and head maps (heads x heads). With hard permutation
/// matrices and orthogonal `o` this is the function-preserving reparameterization;
/// doubly stochastic maps give soft alignments. Requires unit rmsnorm scales.
ParamVars align(const ParamVars& params, const ad::Var& o, const std::vector<ad::Var>& ffn,
                const std::vector<ad::Var>& heads, const TransformerConfig& config);

/// Intermediate values recorded by `forward` when requested.
struct ForwardTrace {
  std::vector<Matrix> residual;    // stream entering each layer, then before the final norm
  std::vector<Matrix> ffn_hidden;  // post-activation, per layer
  std::vector<Matrix> queries;     // per layer, heads stacked along columns
  std::vector<Matrix> keys;
};

/// Logits (rows = batch·seq, cols = vocab).
ad::Var forward(const ParamVars& params, const TransformerConfig& config,
                const TokenMatrix& inputs, ForwardTrace* trace = nullptr);

/// Scalar mean cross-entropy of the forward pass.
ad::Var loss(const ParamVars& params, const TransformerConfig& config, const Batch& batch);

/// Cross-entropy of Σ w_m·models[m], mixed in the given head space.
ad::Var mixture_loss(const std::vector<ParamVars>& models, const std::vector<double>& weights,
                     const TransformerConfig& config, const Batch& batch, HeadSpace space);

}  // namespace rebasin
