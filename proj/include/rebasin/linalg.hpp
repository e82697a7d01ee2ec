#pragma once

// Dense primitives shared by every other module: SVD, orthogonal Procrustes,
// linear assignment, Sinkhorn normalization and eigen-angle extraction.
// All functions are pure and accept any Eigen expression.

#include "rebasin/common.hpp"
#include "rebasin/permutation.hpp"

#include <Eigen/SVD>
#include <algorithm>
#include <limits>
#include <numbers>

namespace rebasin {

struct SvdResult {
  Matrix u;      // m x k, orthonormal columns
  Vector sigma;  // k, non-increasing
  Matrix v;      // n x k, orthonormal columns
};

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& a) {
  return a.derived().array().isFinite().all();
}

/// Thin SVD, k = min(m, n).
template <typename Derived>
SvdResult svd(const Eigen::MatrixBase<Derived>& a) {
  if (!all_finite(a)) throw NumericError("svd: non-finite entry in " + shape_str(a) + " input");
  Matrix work = a;
  Eigen::JacobiSVD<Matrix> solver(work, Eigen::ComputeThinU | Eigen::ComputeThinV);
  if (solver.info() != Eigen::Success)
    throw NumericError("svd: Jacobi iteration did not converge for " + shape_str(a) + " input");
  return {solver.matrixU(), solver.singularValues(), solver.matrixV()};
}

/// Nearest orthogonal matrix in Frobenius norm: U·Vᵀ.
template <typename Derived>
Matrix project_orthogonal(const Eigen::MatrixBase<Derived>& z) {
  const SvdResult s = svd(z);
  return s.u * s.v.transpose();
}

/// O minimizing ‖r_a − r_b·O‖_F over orthogonal O.
template <typename DA, typename DB>
Matrix procrustes(const Eigen::MatrixBase<DA>& r_a, const Eigen::MatrixBase<DB>& r_b) {
  require(r_a.rows() == r_b.rows() && r_a.cols() == r_b.cols(),
          "procrustes: shape mismatch " + shape_str(r_a) + " vs " + shape_str(r_b));
  return project_orthogonal(r_b.transpose() * r_a);
}

template <typename Derived>
double orthogonality_error(const Eigen::MatrixBase<Derived>& o) {
  return (o.transpose() * o - Matrix::Identity(o.cols(), o.cols())).cwiseAbs().maxCoeff();
}

/// Haar-distributed orthogonal matrix (QR with sign correction).
inline Matrix random_orthogonal(Index n, Rng& rng) {
  const Matrix g = rng.normal_matrix(n, n);
  Eigen::HouseholderQR<Matrix> qr(g);
  Matrix q = qr.householderQ() * Matrix::Identity(n, n);
  const Matrix r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Index j = 0; j < n; ++j)
    if (r(j, j) < 0) q.col(j) *= -1.0;
  return q;
}

struct Assignment {
  Permutation perm;  // perm[i] = column assigned to row i
  double value = 0.0;
};

/// Exact linear assignment by shortest augmenting paths with potentials,
/// O(n³). Ties resolve to the lowest index.
template <typename Derived>
Assignment linear_assignment(const Eigen::MatrixBase<Derived>& cost, bool maximize) {
  require(cost.rows() == cost.cols(),
          "linear_assignment: cost must be square, got " + shape_str(cost));
  require(cost.rows() >= 1, "linear_assignment: empty cost matrix");
  if (!all_finite(cost)) throw ContractViolation("linear_assignment: non-finite cost");

  const Index n = cost.rows();
  const Matrix c = maximize ? Matrix(-cost) : Matrix(cost);
  const double inf = std::numeric_limits<double>::infinity();

  // 1-based arrays; column 0 is the virtual source.
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<Index> row_of_col(n + 1, 0), way(n + 1, 0);
  for (Index i = 1; i <= n; ++i) {
    row_of_col[0] = i;
    Index j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const Index i0 = row_of_col[j0];
      double delta = inf;
      Index j1 = 0;
      for (Index j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double reduced = c(i0 - 1, j - 1) - u[i0] - v[j];
        if (reduced < minv[j]) {
          minv[j] = reduced;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (Index j = 0; j <= n; ++j) {
        if (used[j]) {
          u[row_of_col[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (row_of_col[j0] != 0);
    do {
      const Index j1 = way[j0];
      row_of_col[j0] = row_of_col[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  std::vector<Index> col_of_row(static_cast<std::size_t>(n));
  for (Index j = 1; j <= n; ++j) col_of_row[static_cast<std::size_t>(row_of_col[j] - 1)] = j - 1;
  double value = 0.0;
  for (Index i = 0; i < n; ++i) value += cost(i, col_of_row[static_cast<std::size_t>(i)]);
  return {Permutation(std::move(col_of_row)), value};
}

/// Permutation maximizing ⟨P, Z⟩_F, returned in destination form: P(sigma[i], i) = 1.
template <typename Derived>
Permutation project_permutation(const Eigen::MatrixBase<Derived>& z) {
  // ⟨P, Z⟩ = Σ_i Z(sigma[i], i) = assignment over Zᵀ (row i -> column sigma[i]).
  return linear_assignment(z.transpose(), true).perm;
}

/// Alternating row/column normalization, `iterations` rounds.
template <typename Derived>
Matrix sinkhorn_normalize(const Eigen::MatrixBase<Derived>& p, int iterations) {
  require(p.rows() == p.cols(), "sinkhorn_normalize: expected square input, got " + shape_str(p));
  require(iterations >= 0, "sinkhorn_normalize: negative iteration count");
  if (!all_finite(p) || (p.array() <= 0.0).any())
    throw ContractViolation("sinkhorn_normalize: entries must be finite and strictly positive");
  Matrix q = p;
  for (int k = 0; k < iterations; ++k) {
    q.array().colwise() /= q.rowwise().sum().array();
    q.array().rowwise() /= q.colwise().sum().array();
  }
  return q;
}

/// Arguments in [0, 2π) of the eigenvalues of an orthogonal matrix, sorted.
template <typename Derived>
std::vector<double> eigen_angles(const Eigen::MatrixBase<Derived>& o) {
  require(o.rows() == o.cols(), "eigen_angles: expected square input, got " + shape_str(o));
  if (orthogonality_error(o) > 1e-6)
    throw ContractViolation("eigen_angles: input is not orthogonal within 1e-6");

  constexpr double two_pi = 2.0 * std::numbers::pi;
  const Index n = o.rows();
  Eigen::RealSchur<Matrix> schur(Matrix(o), false);
  const Matrix& t = schur.matrixT();
  std::vector<double> angles;
  angles.reserve(static_cast<std::size_t>(n));
  for (Index i = 0; i < n;) {
    if (i + 1 < n && t(i + 1, i) != 0.0) {
      const double a = t(i, i), b = t(i, i + 1), c = t(i + 1, i), d = t(i + 1, i + 1);
      const double re = 0.5 * (a + d);
      const double disc = 0.25 * (a - d) * (a - d) + b * c;
      const double im = std::sqrt(std::max(0.0, -disc));
      const double theta = std::atan2(im, re);
      angles.push_back(theta);
      angles.push_back(theta == 0.0 ? 0.0 : two_pi - theta);
      i += 2;
    } else {
      angles.push_back(t(i, i) >= 0.0 ? 0.0 : std::numbers::pi);
      i += 1;
    }
  }
  for (auto& a : angles) {
    if (a >= two_pi) a -= two_pi;
    if (a < 0.0) a += two_pi;
  }
  std::sort(angles.begin(), angles.end());
  return angles;
}

}  // namespace rebasin
