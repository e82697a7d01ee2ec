#include "rebasin/autodiff.hpp"

#include <cmath>
#include <limits>
#include <memory>
#include <numbers>

namespace rebasin::ad {

const Matrix& Var::value() const { return tape_->value(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Matrix Gradients::operator[](const Var& v) const {
  const auto id = static_cast<std::size_t>(v.id());
  if (id < grads_.size() && grads_[id].size() == v.value().size() && grads_[id].size() > 0)
    return grads_[id];
  return Matrix::Zero(v.rows(), v.cols());
}

Var Tape::leaf(Matrix value, bool requires_grad) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::record(const char* op, Matrix value, std::initializer_list<Var> inputs,
                 Backward backward) {
  return record(op, std::move(value), std::vector<Var>(inputs), std::move(backward));
}

Var Tape::record(const char* op, Matrix value, const std::vector<Var>& inputs,
                 Backward backward) {
  Node node;
  node.value = std::move(value);
  node.op = op;
  for (const Var& in : inputs) {
    if (in.tape() != this) throw ContractViolation(std::string(op) + ": input from another tape");
    node.requires_grad = node.requires_grad || requires_grad(in.id());
  }
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

void Tape::accumulate(int id, const Matrix& grad) {
  Node& node = nodes_[static_cast<std::size_t>(id)];
  if (!node.requires_grad) return;
  if (grad.rows() != node.value.rows() || grad.cols() != node.value.cols())
    throw ContractViolation(std::string("gradient shape mismatch at ") + node.op + ": " +
                            shape_str(grad) + " vs " + shape_str(node.value));
  if (node.has_grad) {
    node.grad += grad;
  } else {
    node.grad = grad;
    node.has_grad = true;
  }
}

Gradients Tape::backward(const Var& loss) {
  if (loss.tape() != this) throw ContractViolation("backward: loss from another tape");
  if (loss.rows() != 1 || loss.cols() != 1)
    throw ContractViolation("backward: loss must be scalar, got " + shape_str(loss.value()));
  for (auto& n : nodes_) {
    n.has_grad = false;
    n.grad.resize(0, 0);
  }
  accumulate(loss.id(), Matrix::Ones(1, 1));
  for (int id = loss.id(); id >= 0; --id) {
    Node& node = nodes_[static_cast<std::size_t>(id)];
    if (!node.has_grad || !node.backward) continue;
    node.backward(*this, node.grad);
  }
  std::vector<Matrix> grads(nodes_.size());
  for (std::size_t i = 0; i < nodes_.size(); ++i)
    if (nodes_[i].has_grad && !nodes_[i].backward) grads[i] = nodes_[i].grad;
  return Gradients(std::move(grads));
}

namespace {

void check_same_shape(const char* op, const Var& a, const Var& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ContractViolation(std::string(op) + ": shape mismatch " + shape_str(a.value()) +
                            " vs " + shape_str(b.value()));
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows())
    throw ContractViolation("matmul: shape mismatch " + shape_str(a.value()) + " * " +
                            shape_str(b.value()));
  Tape& t = *a.tape();
  const int ia = a.id(), ib = b.id();
  return t.record("matmul", a.value() * b.value(), {a, b}, [ia, ib](Tape& t, const Matrix& g) {
    if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
    if (t.requires_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
  });
}

Var add(const Var& a, const Var& b) {
  check_same_shape("add", a, b);
  const int ia = a.id(), ib = b.id();
  return a.tape()->record("add", a.value() + b.value(), {a, b}, [ia, ib](Tape& t, const Matrix& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, g);
  });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape("sub", a, b);
  const int ia = a.id(), ib = b.id();
  return a.tape()->record("sub", a.value() - b.value(), {a, b}, [ia, ib](Tape& t, const Matrix& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, -g);
  });
}

Var add_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols())
    throw ContractViolation("add_row: expected 1x" + std::to_string(a.cols()) + " row, got " +
                            shape_str(row.value()));
  Matrix out = a.value();
  out.rowwise() += row.value().row(0);
  const int ia = a.id(), ir = row.id();
  return a.tape()->record("add_row", std::move(out), {a, row}, [ia, ir](Tape& t, const Matrix& g) {
    t.accumulate(ia, g);
    if (t.requires_grad(ir)) t.accumulate(ir, g.colwise().sum());
  });
}

Var scale(const Var& a, double factor) {
  const int ia = a.id();
  return a.tape()->record("scale", a.value() * factor, {a},
                          [ia, factor](Tape& t, const Matrix& g) { t.accumulate(ia, g * factor); });
}

Var transpose(const Var& a) {
  const int ia = a.id();
  return a.tape()->record("transpose", a.value().transpose(), {a},
                          [ia](Tape& t, const Matrix& g) { t.accumulate(ia, g.transpose()); });
}

Var hadamard(const Var& a, const Var& b) {
  check_same_shape("hadamard", a, b);
  const int ia = a.id(), ib = b.id();
  return a.tape()->record("hadamard", a.value().cwiseProduct(b.value()), {a, b},
                          [ia, ib](Tape& t, const Matrix& g) {
                            if (t.requires_grad(ia)) t.accumulate(ia, g.cwiseProduct(t.value(ib)));
                            if (t.requires_grad(ib)) t.accumulate(ib, g.cwiseProduct(t.value(ia)));
                          });
}

Var sum(const Var& a) {
  const int ia = a.id();
  const Index r = a.rows(), c = a.cols();
  return a.tape()->record("sum", Matrix::Constant(1, 1, a.value().sum()), {a},
                          [ia, r, c](Tape& t, const Matrix& g) {
                            t.accumulate(ia, Matrix::Constant(r, c, g(0, 0)));
                          });
}

Var exp(const Var& a) {
  const int ia = a.id();
  auto y = std::make_shared<Matrix>(a.value().array().exp().matrix());
  return a.tape()->record("exp", *y, {a}, [ia, y](Tape& t, const Matrix& g) {
    t.accumulate(ia, g.cwiseProduct(*y));
  });
}

Var relu(const Var& a) {
  const int ia = a.id();
  return a.tape()->record("relu", a.value().cwiseMax(0.0), {a}, [ia](Tape& t, const Matrix& g) {
    t.accumulate(ia, (t.value(ia).array() > 0.0).select(g.array(), 0.0).matrix());
  });
}

double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

double gelu_derivative(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

Var gelu(const Var& a) {
  const int ia = a.id();
  return a.tape()->record("gelu", a.value().unaryExpr(&gelu_value), {a},
                          [ia](Tape& t, const Matrix& g) {
                            t.accumulate(ia, g.cwiseProduct(t.value(ia).unaryExpr(&gelu_derivative)));
                          });
}

namespace {

Matrix softmax_rows(const Matrix& x) {
  Matrix y = x;
  for (Index i = 0; i < y.rows(); ++i) {
    const double m = y.row(i).maxCoeff();
    y.row(i) = (y.row(i).array() - m).exp().matrix();
    y.row(i) /= y.row(i).sum();
  }
  return y;
}

Matrix softmax_backward(const Matrix& y, const Matrix& g) {
  const Vector dots = (g.cwiseProduct(y)).rowwise().sum();
  Matrix out = g;
  out.colwise() -= dots;
  return y.cwiseProduct(out);
}

}  // namespace

Var row_softmax(const Var& a) {
  Matrix y = softmax_rows(a.value());
  const int ia = a.id();
  auto y_copy = std::make_shared<Matrix>(y);
  return a.tape()->record("row_softmax", std::move(y), {a},
                          [ia, y_copy](Tape& t, const Matrix& g) {
                            t.accumulate(ia, softmax_backward(*y_copy, g));
                          });
}

Var normalize_rows(const Var& a) {
  const Vector sums = a.value().rowwise().sum();
  Matrix y = a.value();
  y.array().colwise() /= sums.array();
  const int ia = a.id();
  auto y_copy = std::make_shared<Matrix>(y);
  return a.tape()->record("normalize_rows", std::move(y), {a},
                          [ia, y_copy, sums](Tape& t, const Matrix& g) {
                            const Vector dots = g.cwiseProduct(*y_copy).rowwise().sum();
                            Matrix d = g;
                            d.colwise() -= dots;
                            d.array().colwise() /= sums.array();
                            t.accumulate(ia, d);
                          });
}

Var normalize_cols(const Var& a) {
  const RowVector sums = a.value().colwise().sum();
  Matrix y = a.value();
  y.array().rowwise() /= sums.array();
  const int ia = a.id();
  auto y_copy = std::make_shared<Matrix>(y);
  return a.tape()->record("normalize_cols", std::move(y), {a},
                          [ia, y_copy, sums](Tape& t, const Matrix& g) {
                            const RowVector dots = g.cwiseProduct(*y_copy).colwise().sum();
                            Matrix d = g;
                            d.rowwise() -= dots;
                            d.array().rowwise() /= sums.array();
                            t.accumulate(ia, d);
                          });
}

Var gather_rows(const Var& table, std::span<const Index> ids) {
  Matrix out(static_cast<Index>(ids.size()), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= table.rows())
      throw ContractViolation("gather_rows: id " + std::to_string(ids[i]) + " out of range for " +
                              shape_str(table.value()));
    out.row(static_cast<Index>(i)) = table.value().row(ids[i]);
  }
  const int it = table.id();
  const Index rows = table.rows();
  std::vector<Index> idx(ids.begin(), ids.end());
  return table.tape()->record("gather_rows", std::move(out), {table},
                              [it, rows, idx = std::move(idx)](Tape& t, const Matrix& g) {
                                Matrix d = Matrix::Zero(rows, g.cols());
                                for (std::size_t i = 0; i < idx.size(); ++i)
                                  d.row(idx[i]) += g.row(static_cast<Index>(i));
                                t.accumulate(it, d);
                              });
}

Var concat_cols(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  Index cols = 0;
  for (const Var& p : parts) {
    if (p.rows() != parts[0].rows()) throw ContractViolation("concat_cols: row count mismatch");
    cols += p.cols();
  }
  Matrix out(parts[0].rows(), cols);
  std::vector<std::pair<int, Index>> spans;
  Index offset = 0;
  for (const Var& p : parts) {
    out.middleCols(offset, p.cols()) = p.value();
    spans.emplace_back(p.id(), offset);
    offset += p.cols();
  }
  return parts[0].tape()->record("concat_cols", std::move(out), parts,
                                 [spans](Tape& t, const Matrix& g) {
                                   for (const auto& [id, off] : spans)
                                     t.accumulate(id, g.middleCols(off, t.value(id).cols()));
                                 });
}

Var concat_rows(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_rows: no inputs");
  Index rows = 0;
  for (const Var& p : parts) {
    if (p.cols() != parts[0].cols()) throw ContractViolation("concat_rows: column count mismatch");
    rows += p.rows();
  }
  Matrix out(rows, parts[0].cols());
  std::vector<std::pair<int, Index>> spans;
  Index offset = 0;
  for (const Var& p : parts) {
    out.middleRows(offset, p.rows()) = p.value();
    spans.emplace_back(p.id(), offset);
    offset += p.rows();
  }
  return parts[0].tape()->record("concat_rows", std::move(out), parts,
                                 [spans](Tape& t, const Matrix& g) {
                                   for (const auto& [id, off] : spans)
                                     t.accumulate(id, g.middleRows(off, t.value(id).rows()));
                                 });
}

Var slice(const Var& a, Index row, Index rows, Index col, Index cols) {
  if (row < 0 || col < 0 || rows < 0 || cols < 0 || row + rows > a.rows() || col + cols > a.cols())
    throw ContractViolation("slice: block out of range for " + shape_str(a.value()));
  const int ia = a.id();
  const Index r = a.rows(), c = a.cols();
  return a.tape()->record("slice", a.value().block(row, col, rows, cols), {a},
                          [=](Tape& t, const Matrix& g) {
                            Matrix d = Matrix::Zero(r, c);
                            d.block(row, col, rows, cols) = g;
                            t.accumulate(ia, d);
                          });
}

Var kron_identity(const Var& p, Index block) {
  require(block >= 1, "kron_identity: block must be positive");
  const Index n = p.rows(), m = p.cols();
  Matrix out = Matrix::Zero(n * block, m * block);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < m; ++j)
      if (p.value()(i, j) != 0.0)
        out.block(i * block, j * block, block, block).diagonal().setConstant(p.value()(i, j));
  const int ip = p.id();
  return p.tape()->record("kron_identity", std::move(out), {p}, [=](Tape& t, const Matrix& g) {
    Matrix d(n, m);
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < m; ++j) d(i, j) = g.block(i * block, j * block, block, block).trace();
    t.accumulate(ip, d);
  });
}

Var layernorm(const Var& x, const Var& scale, const Var& offset, double eps) {
  const Index n = x.rows(), d = x.cols();
  if (scale.rows() != 1 || scale.cols() != d || offset.rows() != 1 || offset.cols() != d)
    throw ContractViolation("layernorm: scale/offset must be 1x" + std::to_string(d));
  auto xhat = std::make_shared<Matrix>(n, d);
  auto inv_std = std::make_shared<Vector>(n);
  for (Index i = 0; i < n; ++i) {
    const double mean = x.value().row(i).mean();
    const RowVector centered = x.value().row(i).array() - mean;
    const double var = centered.squaredNorm() / static_cast<double>(d);
    (*inv_std)(i) = 1.0 / std::sqrt(var + eps);
    xhat->row(i) = centered * (*inv_std)(i);
  }
  Matrix y = xhat->array().rowwise() * scale.value().row(0).array();
  y.rowwise() += offset.value().row(0);
  const int ix = x.id(), is = scale.id(), io = offset.id();
  return x.tape()->record("layernorm", std::move(y), {x, scale, offset},
                          [=](Tape& t, const Matrix& g) {
                            if (t.requires_grad(is)) t.accumulate(is, g.cwiseProduct(*xhat).colwise().sum());
                            if (t.requires_grad(io)) t.accumulate(io, g.colwise().sum());
                            if (!t.requires_grad(ix)) return;
                            const Matrix dxhat = g.array().rowwise() * t.value(is).row(0).array();
                            Matrix dx(n, d);
                            for (Index i = 0; i < n; ++i) {
                              const double m1 = dxhat.row(i).mean();
                              const double m2 = dxhat.row(i).dot(xhat->row(i)) / static_cast<double>(d);
                              dx.row(i) = (*inv_std)(i) *
                                          (dxhat.row(i).array() - m1 - xhat->row(i).array() * m2).matrix();
                            }
                            t.accumulate(ix, dx);
                          });
}

Var rmsnorm(const Var& x, const Var& scale, double eps) {
  const Index n = x.rows(), d = x.cols();
  if (scale.rows() != 1 || scale.cols() != d)
    throw ContractViolation("rmsnorm: scale must be 1x" + std::to_string(d));
  auto xhat = std::make_shared<Matrix>(n, d);
  auto inv_rms = std::make_shared<Vector>(n);
  for (Index i = 0; i < n; ++i) {
    (*inv_rms)(i) = 1.0 / std::sqrt(x.value().row(i).squaredNorm() / static_cast<double>(d) + eps);
    xhat->row(i) = x.value().row(i) * (*inv_rms)(i);
  }
  Matrix y = xhat->array().rowwise() * scale.value().row(0).array();
  const int ix = x.id(), is = scale.id();
  return x.tape()->record("rmsnorm", std::move(y), {x, scale}, [=](Tape& t, const Matrix& g) {
    if (t.requires_grad(is)) t.accumulate(is, g.cwiseProduct(*xhat).colwise().sum());
    if (!t.requires_grad(ix)) return;
    const Matrix dxhat = g.array().rowwise() * t.value(is).row(0).array();
    Matrix dx(n, d);
    for (Index i = 0; i < n; ++i) {
      const double m2 = dxhat.row(i).dot(xhat->row(i)) / static_cast<double>(d);
      dx.row(i) = (*inv_rms)(i) * (dxhat.row(i).array() - xhat->row(i).array() * m2).matrix();
    }
    t.accumulate(ix, dx);
  });
}

Var cross_entropy(const Var& logits, std::span<const std::int32_t> targets) {
  const Index n = logits.rows(), v = logits.cols();
  if (static_cast<Index>(targets.size()) != n)
    throw ContractViolation("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                            std::to_string(n) + " logit rows");
  auto probs = std::make_shared<Matrix>(softmax_rows(logits.value()));
  double total = 0.0;
  Index count = 0;
  for (Index i = 0; i < n; ++i) {
    const auto y = targets[static_cast<std::size_t>(i)];
    if (y < 0) continue;
    if (y >= v) throw ContractViolation("cross_entropy: target id out of range");
    const double m = logits.value().row(i).maxCoeff();
    const double lse = m + std::log((logits.value().row(i).array() - m).exp().sum());
    total += lse - logits.value()(i, y);
    ++count;
  }
  if (count == 0) throw ContractViolation("cross_entropy: no valid targets");
  std::vector<std::int32_t> tgt(targets.begin(), targets.end());
  const int il = logits.id();
  return logits.tape()->record(
      "cross_entropy", Matrix::Constant(1, 1, total / static_cast<double>(count)), {logits},
      [il, probs, tgt = std::move(tgt), count](Tape& t, const Matrix& g) {
        Matrix d = *probs;
        for (std::size_t i = 0; i < tgt.size(); ++i) {
          if (tgt[i] < 0)
            d.row(static_cast<Index>(i)).setZero();
          else
            d(static_cast<Index>(i), tgt[i]) -= 1.0;
        }
        t.accumulate(il, d * (g(0, 0) / static_cast<double>(count)));
      });
}

Var attention(const Var& q, const Var& k, const Var& v, Index seq_len, Index heads,
              Index head_dim, bool causal) {
  const Index n = q.rows(), width = heads * head_dim;
  if (q.cols() != width || k.cols() != width || v.cols() != width || k.rows() != n ||
      v.rows() != n)
    throw ContractViolation("attention: q/k/v must all be " + shape_str(n, width));
  if (seq_len <= 0 || n % seq_len != 0)
    throw ContractViolation("attention: row count not a multiple of sequence length");
  const Index sequences = n / seq_len;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));

  // probs[s * heads + h] is the seq_len x seq_len attention matrix.
  auto probs = std::make_shared<std::vector<Matrix>>(static_cast<std::size_t>(sequences * heads));
  Matrix out(n, width);
  for (Index s = 0; s < sequences; ++s) {
    for (Index h = 0; h < heads; ++h) {
      const auto qs = q.value().block(s * seq_len, h * head_dim, seq_len, head_dim);
      const auto ks = k.value().block(s * seq_len, h * head_dim, seq_len, head_dim);
      const auto vs = v.value().block(s * seq_len, h * head_dim, seq_len, head_dim);
      Matrix scores = (qs * ks.transpose()) * inv_sqrt;
      if (causal)
        for (Index i = 0; i < seq_len; ++i)
          for (Index j = i + 1; j < seq_len; ++j) scores(i, j) = -std::numeric_limits<double>::infinity();
      Matrix a = softmax_rows(scores);
      out.block(s * seq_len, h * head_dim, seq_len, head_dim) = a * vs;
      (*probs)[static_cast<std::size_t>(s * heads + h)] = std::move(a);
    }
  }
  const int iq = q.id(), ik = k.id(), iv = v.id();
  return q.tape()->record(
      "attention", std::move(out), {q, k, v}, [=](Tape& t, const Matrix& g) {
        Matrix dq = Matrix::Zero(n, width), dk = Matrix::Zero(n, width), dv = Matrix::Zero(n, width);
        for (Index s = 0; s < sequences; ++s) {
          for (Index h = 0; h < heads; ++h) {
            const Matrix& a = (*probs)[static_cast<std::size_t>(s * heads + h)];
            const auto qs = t.value(iq).block(s * seq_len, h * head_dim, seq_len, head_dim);
            const auto ks = t.value(ik).block(s * seq_len, h * head_dim, seq_len, head_dim);
            const auto vs = t.value(iv).block(s * seq_len, h * head_dim, seq_len, head_dim);
            const auto gs = g.block(s * seq_len, h * head_dim, seq_len, head_dim);
            dv.block(s * seq_len, h * head_dim, seq_len, head_dim) = a.transpose() * gs;
            const Matrix da = gs * vs.transpose();
            const Matrix ds = softmax_backward(a, da) * inv_sqrt;
            dq.block(s * seq_len, h * head_dim, seq_len, head_dim) = ds * ks;
            dk.block(s * seq_len, h * head_dim, seq_len, head_dim) = ds.transpose() * qs;
          }
        }
        t.accumulate(iq, dq);
        t.accumulate(ik, dk);
        t.accumulate(iv, dv);
      });
}

void adam_step(std::span<Matrix> params, std::span<const Matrix> grads, AdamState& state,
               const AdamConfig& config) {
  require(params.size() == grads.size(), "adam_step: parameter/gradient count mismatch");
  if (state.m.empty()) {
    for (const Matrix& p : params) {
      state.m.push_back(Matrix::Zero(p.rows(), p.cols()));
      state.v.push_back(Matrix::Zero(p.rows(), p.cols()));
    }
  }
  require(state.m.size() == params.size(), "adam_step: optimizer state size mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].rows() != params[i].rows() || grads[i].cols() != params[i].cols())
      throw ContractViolation("adam_step: gradient shape mismatch for tensor " + std::to_string(i));
    if (!grads[i].array().isFinite().all())
      throw NumericError("adam_step: non-finite gradient in tensor " + std::to_string(i) +
                         " (seed " + std::to_string(state.seed) + ", step " +
                         std::to_string(state.step + 1) + ")");
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.m[i] = config.beta1 * state.m[i] + (1.0 - config.beta1) * grads[i];
    state.v[i] = config.beta2 * state.v[i] + (1.0 - config.beta2) * grads[i].cwiseProduct(grads[i]);
    if (config.weight_decay != 0.0) params[i] *= (1.0 - config.lr * config.weight_decay);
    params[i].array() -= config.lr * (state.m[i].array() / bc1) /
                         ((state.v[i].array() / bc2).sqrt() + config.eps);
  }
}

}  // namespace rebasin::ad
