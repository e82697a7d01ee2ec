#include "rebasin/symmetry.hpp"

#include "rebasin/linalg.hpp"

#include <cmath>

namespace rebasin {

SemiPermutation::SemiPermutation(Index cols, std::vector<Entry> rows)
    : cols_(cols), entries_(std::move(rows)) {
  if (cols_ < 1) throw InvariantViolation("semi-permutation needs at least one column");
  std::vector<double> column_sum(static_cast<std::size_t>(cols_), 0.0);
  for (std::size_t r = 0; r < entries_.size(); ++r) {
    const Entry& e = entries_[r];
    if (e.source < 0) continue;
    if (e.source >= cols_)
      throw InvariantViolation("semi-permutation row " + std::to_string(r) + " points at column " +
                               std::to_string(e.source) + " of " + std::to_string(cols_));
    if (!(e.weight > 0.0) || !std::isfinite(e.weight))
      throw InvariantViolation("semi-permutation row " + std::to_string(r) + " has non-positive weight");
    column_sum[static_cast<std::size_t>(e.source)] += e.weight;
  }
  for (Index c = 0; c < cols_; ++c)
    if (std::abs(column_sum[static_cast<std::size_t>(c)] - 1.0) > 1e-9)
      throw InvariantViolation("semi-permutation column " + std::to_string(c) + " sums to " +
                               std::to_string(column_sum[static_cast<std::size_t>(c)]) + ", expected 1");
}

SemiPermutation SemiPermutation::from_permutation(const Permutation& p) {
  std::vector<Entry> rows(static_cast<std::size_t>(p.size()));
  for (Index i = 0; i < p.size(); ++i) rows[static_cast<std::size_t>(p[i])] = {i, 1.0};
  return SemiPermutation(p.size(), std::move(rows));
}

SemiPermutation SemiPermutation::random(Index rows, Index cols, Rng& rng) {
  require(cols >= 1 && rows >= cols, "SemiPermutation::random: need rows >= cols >= 1");
  std::vector<Index> order(static_cast<std::size_t>(rows));
  for (Index i = 0; i < rows; ++i) order[static_cast<std::size_t>(i)] = i;
  rng.shuffle(order);
  std::vector<Entry> entries(static_cast<std::size_t>(rows));
  std::vector<std::vector<Index>> members(static_cast<std::size_t>(cols));
  for (Index k = 0; k < rows; ++k) {
    const Index col = k < cols ? k : static_cast<Index>(rng.index(static_cast<std::size_t>(cols)));
    members[static_cast<std::size_t>(col)].push_back(order[static_cast<std::size_t>(k)]);
  }
  for (Index c = 0; c < cols; ++c) {
    const auto& m = members[static_cast<std::size_t>(c)];
    const std::vector<double> w = m.size() == 1 ? std::vector<double>{1.0} : rng.dirichlet(m.size(), 1.0);
    // Renormalize against rounding and keep every weight strictly positive.
    double total = 0.0;
    std::vector<double> clamped(w.size());
    for (std::size_t i = 0; i < w.size(); ++i) total += clamped[i] = std::max(w[i], 1e-6);
    for (std::size_t i = 0; i < m.size(); ++i)
      entries[static_cast<std::size_t>(m[i])] = {c, clamped[i] / total};
  }
  return SemiPermutation(cols, std::move(entries));
}

Matrix SemiPermutation::matrix() const {
  Matrix p = Matrix::Zero(rows(), cols_);
  for (Index r = 0; r < rows(); ++r)
    if ((*this)[r].source >= 0) p(r, (*this)[r].source) = (*this)[r].weight;
  return p;
}

Matrix SemiPermutation::support() const {
  Matrix p = Matrix::Zero(rows(), cols_);
  for (Index r = 0; r < rows(); ++r)
    if ((*this)[r].source >= 0) p(r, (*this)[r].source) = 1.0;
  return p;
}

bool SemiPermutation::is_permutation() const {
  if (rows() != cols_) return false;
  for (const Entry& e : entries_)
    if (e.source < 0 || e.weight != 1.0) return false;
  return true;
}

Permutation SemiPermutation::to_permutation() const {
  if (!is_permutation()) throw ContractViolation("semi-permutation is not a hard permutation");
  std::vector<Index> sigma(static_cast<std::size_t>(cols_));
  for (Index r = 0; r < rows(); ++r) sigma[static_cast<std::size_t>((*this)[r].source)] = r;
  return Permutation(std::move(sigma));
}

bool operator==(const SemiPermutation& a, const SemiPermutation& b) {
  if (a.cols_ != b.cols_ || a.rows() != b.rows()) return false;
  for (Index r = 0; r < a.rows(); ++r)
    if (a[r].source != b[r].source || a[r].weight != b[r].weight) return false;
  return true;
}

Matrix checked_orthogonal(Matrix o, double tol) {
  if (o.rows() < o.cols())
    throw ContractViolation("orthogonal map must have rows >= cols, got " + shape_str(o));
  const double err = orthogonality_error(o);
  if (!(err <= tol))
    throw InvariantViolation("map is not column-orthonormal: max |OᵀO - I| = " + std::to_string(err));
  return o;
}

AlignmentMaps AlignmentMaps::identity(const TransformerConfig& c) {
  AlignmentMaps m;
  m.o = Matrix::Identity(c.d_model, c.d_model);
  for (Index l = 0; l < c.layers; ++l) {
    m.ffn.push_back(Permutation::identity(c.d_ff));
    m.heads.push_back(SemiPermutation::from_permutation(Permutation::identity(c.heads)));
  }
  return m;
}

AlignmentMaps AlignmentMaps::random(const TransformerConfig& c, Rng& rng, bool orthogonal) {
  AlignmentMaps m;
  m.o = orthogonal ? random_orthogonal(c.d_model, rng) : Matrix(Matrix::Identity(c.d_model, c.d_model));
  for (Index l = 0; l < c.layers; ++l) {
    m.ffn.push_back(Permutation::random(c.d_ff, rng));
    m.heads.push_back(SemiPermutation::from_permutation(Permutation::random(c.heads, rng)));
  }
  return m;
}

void AlignmentMaps::validate(const TransformerConfig& c) const {
  if (o.rows() != c.d_model || o.cols() != c.d_model)
    throw ContractViolation("residual map is " + shape_str(o) + ", model needs " +
                            shape_str(c.d_model, c.d_model));
  checked_orthogonal(o);
  if (static_cast<Index>(ffn.size()) != c.layers || static_cast<Index>(heads.size()) != c.layers)
    throw ContractViolation("alignment maps cover " + std::to_string(ffn.size()) + " layers, model has " +
                            std::to_string(c.layers));
  for (Index l = 0; l < c.layers; ++l) {
    if (ffn[static_cast<std::size_t>(l)].size() != c.d_ff)
      throw ContractViolation("FFN permutation size does not match d_ff in layer " + std::to_string(l));
    const SemiPermutation& h = heads[static_cast<std::size_t>(l)];
    if (h.rows() != c.heads || h.cols() != c.heads)
      throw ContractViolation("head map must be heads x heads in layer " + std::to_string(l));
  }
}

AlignmentMaps AlignmentMaps::inverse() const {
  AlignmentMaps m;
  m.o = o.transpose();
  for (const Permutation& p : ffn) m.ffn.push_back(p.inverse());
  for (const SemiPermutation& h : heads)
    m.heads.push_back(SemiPermutation::from_permutation(h.to_permutation().inverse()));
  return m;
}

AlignmentMaps AlignmentMaps::then(const AlignmentMaps& next) const {
  require(ffn.size() == next.ffn.size(), "AlignmentMaps::then: layer count mismatch");
  AlignmentMaps m;
  m.o = o * next.o;
  for (std::size_t l = 0; l < ffn.size(); ++l) {
    m.ffn.push_back(ffn[l].then(next.ffn[l]));
    m.heads.push_back(SemiPermutation::from_permutation(
        heads[l].to_permutation().then(next.heads[l].to_permutation())));
  }
  return m;
}

bool is_absorbed(const TransformerParams& p, const TransformerConfig& c) {
  if (c.norm != NormKind::rmsnorm) return false;
  auto unit = [](const NormParams& n) { return (n.scale.array() == 1.0).all(); };
  for (const LayerParams& l : p.layers)
    if (!unit(l.norm1) || !unit(l.norm2)) return false;
  return unit(p.final_norm);
}

LayerParams head_mix(const LayerParams& layer, const TransformerConfig& config, const SemiPermutation& p) {
  require(p.cols() == config.heads, "head_mix: map has " + std::to_string(p.cols()) +
                                        " source heads, layer has " + std::to_string(config.heads));
  const Index dk = config.d_head, d = config.d_model, m = p.rows();
  LayerParams out = layer;
  out.wq = Matrix::Zero(m * dk, d);
  out.wk = Matrix::Zero(m * dk, d);
  out.wv = Matrix::Zero(m * dk, d);
  out.bq = Vector::Zero(m * dk);
  out.bk = Vector::Zero(m * dk);
  out.bv = Vector::Zero(m * dk);
  out.wo = Matrix::Zero(d, m * dk);
  for (Index j = 0; j < m; ++j) {
    const auto& e = p[j];
    if (e.source < 0) continue;
    const Index src = e.source * dk, dst = j * dk;
    out.wq.middleRows(dst, dk) = layer.wq.middleRows(src, dk);
    out.wk.middleRows(dst, dk) = layer.wk.middleRows(src, dk);
    out.wv.middleRows(dst, dk) = layer.wv.middleRows(src, dk);
    out.bq.segment(dst, dk) = layer.bq.segment(src, dk);
    out.bk.segment(dst, dk) = layer.bk.segment(src, dk);
    out.bv.segment(dst, dk) = layer.bv.segment(src, dk);
    out.wo.middleCols(dst, dk) = e.weight * layer.wo.middleCols(src, dk);
  }
  return out;
}

LayerParams ffn_mix(const LayerParams& layer, const TransformerConfig& config, const SemiPermutation& p) {
  if (config.activation != Activation::relu)
    throw ContractViolation("FFN semi-permutations need a positively homogeneous activation (relu); model uses " +
                            std::string(to_string(config.activation)));
  require(p.cols() == config.d_ff, "ffn_mix: map has " + std::to_string(p.cols()) + " source neurons, layer has " +
                                       std::to_string(config.d_ff));
  LayerParams out = layer;
  const Matrix pm = p.matrix();
  out.w1 = pm * layer.w1;
  out.b1 = pm * layer.b1;
  out.w2 = layer.w2 * p.support().transpose();
  return out;
}

namespace {

template <typename F>
std::pair<TransformerParams, TransformerConfig> per_layer(const TransformerParams& params,
                                                          const TransformerConfig& config,
                                                          const std::vector<SemiPermutation>& maps, F&& f) {
  check_shapes(params, config);
  require(static_cast<Index>(maps.size()) == config.layers, "one map per layer required");
  TransformerParams out = params;
  for (std::size_t l = 0; l < maps.size(); ++l) out.layers[l] = f(params.layers[l], config, maps[l]);
  return {std::move(out), config};
}

}  // namespace

std::pair<TransformerParams, TransformerConfig> widen_heads(const TransformerParams& params,
                                                            const TransformerConfig& config,
                                                            const std::vector<SemiPermutation>& maps) {
  for (const auto& m : maps) require(m.rows() == maps.front().rows(), "widen_heads: head counts differ per layer");
  auto [p, c] = per_layer(params, config, maps, head_mix);
  c.heads = maps.front().rows();
  return {std::move(p), c};
}

std::pair<TransformerParams, TransformerConfig> widen_ffn(const TransformerParams& params,
                                                          const TransformerConfig& config,
                                                          const std::vector<SemiPermutation>& maps) {
  for (const auto& m : maps) require(m.rows() == maps.front().rows(), "widen_ffn: widths differ per layer");
  auto [p, c] = per_layer(params, config, maps, ffn_mix);
  c.d_ff = maps.front().rows();
  return {std::move(p), c};
}

TransformerParams apply_alignment(const TransformerParams& params, const TransformerConfig& config,
                                  const AlignmentMaps& maps) {
  check_shapes(params, config);
  maps.validate(config);
  if (!is_absorbed(params, config))
    throw ContractViolation("apply_alignment needs rmsnorm with unit scales; run absorb_layernorm first");
  const Matrix& o = maps.o;
  const Matrix ot = o.transpose();
  TransformerParams out = params;
  out.token_embedding = params.token_embedding * o;
  out.position_embedding = params.position_embedding * o;
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const LayerParams x = head_mix(params.layers[l], config, maps.heads[l]);
    const Permutation& p = maps.ffn[l];
    LayerParams& y = out.layers[l];
    y.wq = x.wq * o;
    y.wk = x.wk * o;
    y.wv = x.wv * o;
    y.bq = x.bq;
    y.bk = x.bk;
    y.bv = x.bv;
    y.wo = ot * x.wo;
    y.bo = ot * x.bo;
    y.w1 = p.permute_rows(x.w1) * o;
    y.b1 = p.permute_rows(x.b1);
    y.w2 = ot * p.permute_cols(x.w2);
    y.b2 = ot * x.b2;
  }
  out.unembedding = params.unembedding * o;
  return out;
}

namespace {

void check_scale(const Vector& s, const std::string& where) {
  for (Index i = 0; i < s.size(); ++i)
    if (!(std::abs(s(i)) >= 1e-12))
      throw NumericError("cannot absorb " + where + ": scale entry " + std::to_string(i) +
                         " is degenerate (|alpha| < 1e-12)");
}

// Reader W·(diag(α)·n + β) + b  ->  (W·diag(α))·n + (b + W·β).
void fold_reader(Matrix& w, Vector& b, const NormParams& n) {
  if (n.offset.size() > 0) b += w * n.offset;
  w = w * n.scale.asDiagonal();
}

// Row-stored reader, logits = U·(diag(α)·n + β) + u.
void fold_rows(Matrix& u, Vector& bias, const NormParams& n) { fold_reader(u, bias, n); }

NormParams unit_norm(Index d) { return {Vector::Ones(d), Vector()}; }

}  // namespace

Absorbed absorb_layernorm(const TransformerParams& params, const TransformerConfig& config) {
  check_shapes(params, config);
  if (is_absorbed(params, config)) return {params, config, false};
  const bool layernorm = config.norm == NormKind::layernorm;
  const Index d = config.d_model;
  TransformerParams out = params;
  check_scale(params.final_norm.scale, "final_norm");
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    check_scale(params.layers[l].norm1.scale, "layers." + std::to_string(l) + ".norm1");
    check_scale(params.layers[l].norm2.scale, "layers." + std::to_string(l) + ".norm2");
  }

  if (layernorm) {
    // Center every residual writer so the stream stays mean-free; LayerNorm
    // then coincides with RMSNorm.
    auto center_rows = [](Matrix& m) { m = m.colwise() - m.rowwise().mean(); };
    auto center_cols = [](Matrix& m) { m = m.rowwise() - m.colwise().mean(); };
    auto center_vec = [](Vector& v) { v.array() -= v.mean(); };
    center_rows(out.token_embedding);
    center_rows(out.position_embedding);
    for (LayerParams& x : out.layers) {
      center_cols(x.wo);
      center_vec(x.bo);
      center_cols(x.w2);
      center_vec(x.b2);
    }
  }
  for (LayerParams& x : out.layers) {
    fold_reader(x.wq, x.bq, x.norm1);
    fold_reader(x.wk, x.bk, x.norm1);
    fold_reader(x.wv, x.bv, x.norm1);
    fold_reader(x.w1, x.b1, x.norm2);
    x.norm1 = unit_norm(d);
    x.norm2 = unit_norm(d);
  }
  fold_rows(out.unembedding, out.unembedding_bias, out.final_norm);
  out.final_norm = unit_norm(d);

  TransformerConfig c = config;
  c.norm = NormKind::rmsnorm;
  return {std::move(out), c, true};
}

std::pair<TransformerParams, TransformerConfig> expand_width(const TransformerParams& params,
                                                             const TransformerConfig& config,
                                                             const Matrix& o) {
  check_shapes(params, config);
  if (o.rows() < o.cols())
    throw ContractViolation("expand_width: target width " + std::to_string(o.rows()) +
                            " is smaller than source width " + std::to_string(o.cols()));
  require(o.cols() == config.d_model, "expand_width: map has " + std::to_string(o.cols()) +
                                          " columns, model width is " + std::to_string(config.d_model));
  checked_orthogonal(o);
  if (!is_absorbed(params, config))
    throw ContractViolation("expand_width needs rmsnorm with unit scales; run absorb_layernorm first");

  const Index m = o.rows(), n = o.cols();
  const double c = std::sqrt(static_cast<double>(n) / static_cast<double>(m));
  const Matrix ot = o.transpose();
  const Matrix reader = ot * c;
  TransformerParams out = params;
  out.token_embedding = params.token_embedding * ot;
  out.position_embedding = params.position_embedding * ot;
  for (LayerParams& x : out.layers) {
    x.norm1 = unit_norm(m);
    x.norm2 = unit_norm(m);
    x.wq = x.wq * reader;
    x.wk = x.wk * reader;
    x.wv = x.wv * reader;
    x.wo = o * x.wo;
    x.bo = o * x.bo;
    x.w1 = x.w1 * reader;
    x.w2 = o * x.w2;
    x.b2 = o * x.b2;
  }
  out.final_norm = unit_norm(m);
  out.unembedding = params.unembedding * reader;

  TransformerConfig cfg = config;
  cfg.d_model = m;
  cfg.norm_eps = config.norm_eps * static_cast<double>(n) / static_cast<double>(m);
  return {std::move(out), cfg};
}

TransformerParams canonicalize_heads(const TransformerParams& params, const TransformerConfig& config) {
  check_shapes(params, config);
  const Index dk = config.d_head;
  TransformerParams out = params;
  auto block_norm = [dk](const Matrix& w, const Vector& b, Index h) {
    return std::sqrt(w.middleRows(h * dk, dk).squaredNorm() + b.segment(h * dk, dk).squaredNorm());
  };
  for (LayerParams& x : out.layers) {
    for (Index h = 0; h < config.heads; ++h) {
      const double nq = block_norm(x.wq, x.bq, h), nk = block_norm(x.wk, x.bk, h);
      if (nq > 0.0 && nk > 0.0) {
        const double s = std::sqrt(nk / nq);
        x.wq.middleRows(h * dk, dk) *= s;
        x.bq.segment(h * dk, dk) *= s;
        x.wk.middleRows(h * dk, dk) /= s;
        x.bk.segment(h * dk, dk) /= s;
      }
      const double nv = block_norm(x.wv, x.bv, h), no = x.wo.middleCols(h * dk, dk).norm();
      if (nv > 0.0 && no > 0.0) {
        const double t = std::sqrt(no / nv);
        x.wv.middleRows(h * dk, dk) *= t;
        x.bv.segment(h * dk, dk) *= t;
        x.wo.middleCols(h * dk, dk) /= t;
      }
    }
  }
  return out;
}

Transformation random_symmetry(SymmetryClass cls, Index rows, Index cols, std::uint64_t seed) {
  Rng rng(seed);
  switch (cls) {
    case SymmetryClass::permutation:
      return Permutation::random(cols, rng);
    case SymmetryClass::semi_permutation:
      return SemiPermutation::random(rows, cols, rng);
    case SymmetryClass::orthogonal: {
      require(rows >= cols, "random_symmetry: orthogonal maps need rows >= cols");
      return Matrix(random_orthogonal(rows, rng).leftCols(cols));
    }
    case SymmetryClass::invertible: {
      const Matrix u = random_orthogonal(cols, rng), v = random_orthogonal(cols, rng);
      Vector s(cols);
      for (Index i = 0; i < cols; ++i) s(i) = rng.uniform(0.5, 2.0);
      return Matrix(u * s.asDiagonal() * v.transpose());
    }
  }
  throw ContractViolation("random_symmetry: unknown class");
}

}  // namespace rebasin
