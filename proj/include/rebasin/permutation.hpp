#pragma once

#include "rebasin/common.hpp"

#include <vector>

namespace rebasin {

/// Bijection on {0..n-1}. `sigma[i]` is the destination row of source row i,
/// so the matrix form has P(sigma[i], i) = 1 and (P·X) moves row i of X to
/// row sigma[i].
class Permutation {
 public:
  Permutation() = default;

  explicit Permutation(std::vector<Index> sigma) : sigma_(std::move(sigma)) {
    std::vector<char> seen(sigma_.size(), 0);
    for (Index s : sigma_) {
      if (s < 0 || s >= size() || seen[static_cast<std::size_t>(s)])
        throw InvariantViolation("permutation is not a bijection on {0.." +
                                 std::to_string(size() - 1) + "}");
      seen[static_cast<std::size_t>(s)] = 1;
    }
  }

  static Permutation identity(Index n) {
    std::vector<Index> s(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) s[static_cast<std::size_t>(i)] = i;
    return Permutation(std::move(s));
  }

  static Permutation random(Index n, Rng& rng) {
    std::vector<Index> s(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) s[static_cast<std::size_t>(i)] = i;
    rng.shuffle(s);
    return Permutation(std::move(s));
  }

  Index size() const { return static_cast<Index>(sigma_.size()); }
  Index operator[](Index i) const { return sigma_[static_cast<std::size_t>(i)]; }
  const std::vector<Index>& indices() const { return sigma_; }

  bool is_identity() const {
    for (Index i = 0; i < size(); ++i)
      if ((*this)[i] != i) return false;
    return true;
  }

  Permutation inverse() const {
    std::vector<Index> inv(sigma_.size());
    for (Index i = 0; i < size(); ++i) inv[static_cast<std::size_t>((*this)[i])] = i;
    return Permutation(std::move(inv));
  }

  /// Matrix of `then ∘ this`: apply this permutation first, then `then`.
  Permutation then(const Permutation& next) const {
    require(next.size() == size(), "permutation size mismatch in composition");
    std::vector<Index> s(sigma_.size());
    for (Index i = 0; i < size(); ++i) s[static_cast<std::size_t>(i)] = next[(*this)[i]];
    return Permutation(std::move(s));
  }

  Matrix matrix() const {
    Matrix p = Matrix::Zero(size(), size());
    for (Index i = 0; i < size(); ++i) p((*this)[i], i) = 1.0;
    return p;
  }

  /// P·X
  template <typename Derived>
  Matrix permute_rows(const Eigen::MatrixBase<Derived>& x) const {
    require(x.rows() == size(), "permute_rows: expected " + std::to_string(size()) +
                                    " rows, got " + shape_str(x));
    Matrix out(x.rows(), x.cols());
    for (Index i = 0; i < size(); ++i) out.row((*this)[i]) = x.row(i);
    return out;
  }

  /// X·Pᵀ
  template <typename Derived>
  Matrix permute_cols(const Eigen::MatrixBase<Derived>& x) const {
    require(x.cols() == size(), "permute_cols: expected " + std::to_string(size()) +
                                    " cols, got " + shape_str(x));
    Matrix out(x.rows(), x.cols());
    for (Index i = 0; i < size(); ++i) out.col((*this)[i]) = x.col(i);
    return out;
  }

  /// Block version of P·X for stacked per-head parameters: block i of `block`
  /// rows moves to block sigma[i].
  template <typename Derived>
  Matrix permute_row_blocks(const Eigen::MatrixBase<Derived>& x, Index block) const {
    require(x.rows() == size() * block, "permute_row_blocks: row count mismatch");
    Matrix out(x.rows(), x.cols());
    for (Index i = 0; i < size(); ++i)
      out.middleRows((*this)[i] * block, block) = x.middleRows(i * block, block);
    return out;
  }

  template <typename Derived>
  Matrix permute_col_blocks(const Eigen::MatrixBase<Derived>& x, Index block) const {
    require(x.cols() == size() * block, "permute_col_blocks: column count mismatch");
    Matrix out(x.rows(), x.cols());
    for (Index i = 0; i < size(); ++i)
      out.middleCols((*this)[i] * block, block) = x.middleCols(i * block, block);
    return out;
  }

  friend bool operator==(const Permutation& a, const Permutation& b) {
    return a.sigma_ == b.sigma_;
  }

 private:
  std::vector<Index> sigma_;
};

}  // namespace rebasin
