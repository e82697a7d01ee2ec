#pragma once

// Minimal reverse-mode automatic differentiation over dense matrices.
//
// A Tape records operations in topological order; `backward` walks it once
// in reverse. Vars are lightweight handles into a tape. One tape is meant to
// live for one optimization step and be discarded afterwards.

#include "rebasin/common.hpp"

#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace rebasin::ad {

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  const Matrix& value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  bool requires_grad() const;
  int id() const { return id_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

/// Gradients keyed by node id. Leaves the loss does not depend on report zeros.
class Gradients {
 public:
  Gradients() = default;
  explicit Gradients(std::vector<Matrix> grads) : grads_(std::move(grads)) {}
  Matrix operator[](const Var& v) const;

 private:
  std::vector<Matrix> grads_;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Matrix& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Matrix value, bool requires_grad = true);
  Var constant(Matrix value) { return leaf(std::move(value), false); }

  /// Records an op node. `backward` is dropped when no input requires grad.
  Var record(const char* op, Matrix value, std::initializer_list<Var> inputs, Backward backward);
  Var record(const char* op, Matrix value, const std::vector<Var>& inputs, Backward backward);

  Gradients backward(const Var& loss);

  const Matrix& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  void accumulate(int id, const Matrix& grad);
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    bool has_grad = false;
    const char* op = "leaf";
    Backward backward;
  };
  std::deque<Node> nodes_;
};

// Elementwise / structural ops.
Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var add_row(const Var& a, const Var& row);  // broadcast a 1×n row over all rows
Var scale(const Var& a, double factor);
Var transpose(const Var& a);
Var hadamard(const Var& a, const Var& b);
Var sum(const Var& a);
Var exp(const Var& a);
Var relu(const Var& a);
Var gelu(const Var& a);
Var row_softmax(const Var& a);
Var normalize_rows(const Var& a);
Var normalize_cols(const Var& a);
Var gather_rows(const Var& table, std::span<const Index> ids);
Var concat_cols(const std::vector<Var>& parts);
Var concat_rows(const std::vector<Var>& parts);
Var slice(const Var& a, Index row, Index rows, Index col, Index cols);

/// Kronecker product P ⊗ I_block.
Var kron_identity(const Var& p, Index block);

// Normalization over each row. `scale`/`offset` are 1×n rows.
Var layernorm(const Var& x, const Var& scale, const Var& offset, double eps);
Var rmsnorm(const Var& x, const Var& scale, double eps);

/// Mean token negative log-likelihood; targets < 0 are ignored. Returns 1×1.
Var cross_entropy(const Var& logits, std::span<const std::int32_t> targets);

/// Fused multi-head scaled dot-product attention over `rows / seq_len`
/// independent sequences. q, k, v are (sequences·seq_len) × (heads·head_dim);
/// head h occupies columns [h·head_dim, (h+1)·head_dim).
Var attention(const Var& q, const Var& k, const Var& v, Index seq_len, Index heads,
              Index head_dim, bool causal);

// Plain-value versions used by forward passes and finite-difference oracles.
double gelu_value(double x);
double gelu_derivative(double x);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled (AdamW style)
};

struct AdamState {
  std::vector<Matrix> m;
  std::vector<Matrix> v;
  long step = 0;
  std::uint64_t seed = 0;  // reported in diagnostics only
};

/// One Adam update with bias correction. Moments are zero-initialized on the
/// first call. Throws NumericError on a non-finite gradient.
void adam_step(std::span<Matrix> params, std::span<const Matrix> grads, AdamState& state,
               const AdamConfig& config);

}  // namespace rebasin::ad
