#pragma once

// Desk-scale pre-norm transformer.
//
// Convention: column vectors, y = W·x. A residual vector r has d_model
// entries; token/position embeddings and the unembedding store one residual
// vector per row. Per-head projections are stacked: rows [h·d_head, (h+1)·d_head)
// of wq/wk/wv and the matching columns of wo belong to head h.
//
//   x   = tok[id] + pos[t]
//   x  += Wo · MHA(Wq·n1(x)+bq, Wk·n1(x)+bk, Wv·n1(x)+bv) + bo
//   x  += W2 · act(W1·n2(x) + b1) + b2
//   out = U · nf(x) + u

#include "rebasin/common.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace rebasin {

enum class Activation { gelu, relu };
enum class NormKind { layernorm, rmsnorm };

const char* to_string(Activation a);
const char* to_string(NormKind n);
Activation parse_activation(const std::string& s);
NormKind parse_norm(const std::string& s);

struct TransformerConfig {
  Index layers = 4;
  Index heads = 4;
  Index d_model = 64;  // residual width
  Index d_head = 16;   // per-head width; d_model == heads * d_head is not required
  Index d_ff = 128;
  Index vocab = 100;
  Index max_seq = 32;
  Activation activation = Activation::gelu;
  NormKind norm = NormKind::rmsnorm;
  double norm_eps = 1e-5;
  bool causal = true;

  Index attn_width() const { return heads * d_head; }
  void validate() const;

  std::map<std::string, std::string> to_kv() const;
  static TransformerConfig from_kv(const std::map<std::string, std::string>& kv);

  friend bool operator==(const TransformerConfig&, const TransformerConfig&) = default;
};

struct NormParams {
  Vector scale;
  Vector offset;  // empty for rmsnorm
};

struct LayerParams {
  NormParams norm1;
  Matrix wq, wk, wv;  // attn_width x d_model
  Vector bq, bk, bv;  // attn_width
  Matrix wo;          // d_model x attn_width
  Vector bo;          // d_model
  NormParams norm2;
  Matrix w1;  // d_ff x d_model
  Vector b1;  // d_ff
  Matrix w2;  // d_model x d_ff
  Vector b2;  // d_model
};

struct TransformerParams {
  Matrix token_embedding;     // vocab x d_model
  Matrix position_embedding;  // max_seq x d_model
  std::vector<LayerParams> layers;
  NormParams final_norm;
  Matrix unembedding;       // vocab x d_model
  Vector unembedding_bias;  // vocab
};

/// Visits every tensor in the fixed serialization order. `f(name, tensor)`
/// receives Matrix& or Vector&; empty offsets (rmsnorm) are skipped.
template <typename Params, typename F>
void for_each_tensor(Params& p, F&& f) {
  auto norm = [&](const std::string& prefix, auto& n) {
    f(prefix + ".scale", n.scale);
    if (n.offset.size() > 0) f(prefix + ".offset", n.offset);
  };
  f(std::string("token_embedding"), p.token_embedding);
  f(std::string("position_embedding"), p.position_embedding);
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    auto& layer = p.layers[l];
    const std::string pre = "layers." + std::to_string(l) + ".";
    norm(pre + "norm1", layer.norm1);
    f(pre + "wq", layer.wq);
    f(pre + "wk", layer.wk);
    f(pre + "wv", layer.wv);
    f(pre + "bq", layer.bq);
    f(pre + "bk", layer.bk);
    f(pre + "bv", layer.bv);
    f(pre + "wo", layer.wo);
    f(pre + "bo", layer.bo);
    norm(pre + "norm2", layer.norm2);
    f(pre + "w1", layer.w1);
    f(pre + "b1", layer.b1);
    f(pre + "w2", layer.w2);
    f(pre + "b2", layer.b2);
  }
  norm(std::string("final_norm"), p.final_norm);
  f(std::string("unembedding"), p.unembedding);
  f(std::string("unembedding_bias"), p.unembedding_bias);
}

/// Every tensor as a matrix (vectors become n x 1), in visiting order.
std::vector<Matrix> flatten(const TransformerParams& p);
void unflatten(TransformerParams& p, const std::vector<Matrix>& tensors);

/// Throws ContractViolation naming the first tensor whose shape disagrees.
void check_shapes(const TransformerParams& p, const TransformerConfig& config);

TransformerParams zeros_like(const TransformerConfig& config);
TransformerParams init_params(const TransformerConfig& config, std::uint64_t seed);

bool bitwise_equal(const TransformerParams& a, const TransformerParams& b);
double max_abs_diff(const TransformerParams& a, const TransformerParams& b);
double squared_norm(const TransformerParams& p);

using TokenMatrix = Eigen::Matrix<std::int32_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Inputs and next-token targets, batch x seq. Target -1 means "no target".
struct Batch {
  TokenMatrix inputs;
  TokenMatrix targets;
};

/// Logits with one row per (sequence, position): row b·seq + t.
Matrix forward(const TransformerParams& params, const TransformerConfig& config,
               const TokenMatrix& inputs);

/// Mean negative log-likelihood over all positions with a target.
double cross_entropy(const Matrix& logits, const TokenMatrix& targets);

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
  Index tokens = 0;
};

/// Token-weighted loss and accuracy over a list of batches.
EvalResult evaluate(const TransformerParams& params, const TransformerConfig& config,
                    const std::vector<Batch>& data);

/// Binary checkpoint, little-endian: magic "RBKT0001", config block
/// (u64 byte length + "key=value\n" lines), u64 tensor count, then per
/// tensor u32 name length, name, u32 rank, u64 dims, f64 payload
/// (row-major), in `for_each_tensor` order.
void save_checkpoint(const TransformerParams& params, const TransformerConfig& config,
                     const std::string& path);

struct Checkpoint {
  TransformerParams params;
  TransformerConfig config;
};

Checkpoint load_checkpoint(const std::string& path);

}  // namespace rebasin
