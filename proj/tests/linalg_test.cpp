#include "rebasin/linalg.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

using namespace rebasin;

namespace {

// Exhaustive search over all n! assignments.
double brute_force_assignment(const Matrix& cost, bool maximize) {
  std::vector<Index> perm(static_cast<std::size_t>(cost.rows()));
  std::iota(perm.begin(), perm.end(), 0);
  double best = maximize ? -1e300 : 1e300;
  do {
    double v = 0.0;
    for (Index i = 0; i < cost.rows(); ++i) v += cost(i, perm[static_cast<std::size_t>(i)]);
    best = maximize ? std::max(best, v) : std::min(best, v);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

}  // namespace

TEST(Svd, ReconstructsRectangularInput) {
  Rng rng(3);
  for (auto [m, n] : {std::pair<Index, Index>{5, 3}, {3, 5}, {6, 6}}) {
    const Matrix a = rng.normal_matrix(m, n);
    const SvdResult s = svd(a);
    EXPECT_LT((s.u * s.sigma.asDiagonal() * s.v.transpose() - a).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT(orthogonality_error(s.u), 1e-12);
    EXPECT_LT(orthogonality_error(s.v), 1e-12);
    for (Index k = 1; k < s.sigma.size(); ++k) EXPECT_GE(s.sigma(k - 1), s.sigma(k));
  }
}

TEST(Svd, RejectsNonFinite) {
  Matrix a = Matrix::Identity(3, 3);
  a(1, 2) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(svd(a), NumericError);
}

TEST(Procrustes, RecoversPlantedRotation) {
  Rng rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    const Matrix rb = rng.normal_matrix(40, 6);
    const Matrix o = random_orthogonal(6, rng);
    const Matrix ra = rb * o;
    const Matrix found = procrustes(ra, rb);
    EXPECT_LT((found - o).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(Procrustes, BeatsRandomOrthogonalCandidates) {
  // Property: no sampled orthogonal matrix does better than the closed form.
  Rng rng(12);
  const Matrix ra = rng.normal_matrix(20, 5), rb = rng.normal_matrix(20, 5);
  const double best = (ra - rb * procrustes(ra, rb)).norm();
  for (int k = 0; k < 200; ++k) EXPECT_LE(best, (ra - rb * random_orthogonal(5, rng)).norm() + 1e-12);
}

TEST(Procrustes, ShapeMismatchThrows) {
  EXPECT_THROW(procrustes(Matrix::Zero(3, 2), Matrix::Zero(2, 2)), ContractViolation);
}

TEST(ProjectOrthogonal, IsIdempotentOnOrthogonalInput) {
  Rng rng(4);
  const Matrix o = random_orthogonal(7, rng);
  EXPECT_LT((project_orthogonal(o) - o).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(LinearAssignment, MatchesBruteForce) {
  Rng rng(5);
  for (int trial = 0; trial < 60; ++trial) {
    const Index n = 2 + static_cast<Index>(rng.index(6));
    const Matrix c = rng.uniform_matrix(n, n, -3.0, 3.0);
    for (bool maximize : {false, true}) {
      const Assignment a = linear_assignment(c, maximize);
      EXPECT_NEAR(a.value, brute_force_assignment(c, maximize), 1e-9) << "n=" << n;
    }
  }
}

TEST(LinearAssignment, IntegerCostsWithTies) {
  Rng rng(6);
  for (int trial = 0; trial < 40; ++trial) {
    Matrix c(6, 6);
    for (Index i = 0; i < 6; ++i)
      for (Index j = 0; j < 6; ++j) c(i, j) = static_cast<double>(rng.index(3));
    EXPECT_DOUBLE_EQ(linear_assignment(c, false).value, brute_force_assignment(c, false));
  }
}

TEST(LinearAssignment, AllEqualCostsGiveIdentity) {
  const Assignment a = linear_assignment(Matrix::Constant(5, 5, 2.0), false);
  EXPECT_TRUE(a.perm.is_identity());
  EXPECT_DOUBLE_EQ(a.value, 10.0);
}

TEST(LinearAssignment, SingleElement) {
  Matrix c(1, 1);
  c << 4.5;
  const Assignment a = linear_assignment(c, true);
  EXPECT_EQ(a.perm[0], 0);
  EXPECT_DOUBLE_EQ(a.value, 4.5);
}

TEST(LinearAssignment, RejectsBadInput) {
  EXPECT_THROW(linear_assignment(Matrix::Zero(2, 3), false), ContractViolation);
  Matrix c = Matrix::Zero(2, 2);
  c(0, 0) = std::numeric_limits<double>::infinity();
  EXPECT_THROW(linear_assignment(c, false), ContractViolation);
}

TEST(ProjectPermutation, RecoversPermutationMatrix) {
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const Permutation p = Permutation::random(9, rng);
    const Matrix noisy = p.matrix() + 0.1 * rng.normal_matrix(9, 9);
    EXPECT_EQ(project_permutation(noisy), p);
  }
}

TEST(Sinkhorn, RowAndColumnSumsConverge) {
  Rng rng(9);
  for (int trial = 0; trial < 100; ++trial) {
    const Matrix p = rng.uniform_matrix(8, 8, 0.01, 1.0);
    const Matrix q = sinkhorn_normalize(p, 50);
    EXPECT_LT((q.rowwise().sum().array() - 1.0).abs().maxCoeff(), 1e-6);
    EXPECT_LT((q.colwise().sum().array() - 1.0).abs().maxCoeff(), 1e-6);
  }
}

TEST(Sinkhorn, ZeroIterationsIsIdentityMap) {
  Matrix p = Matrix::Constant(3, 3, 0.5);
  EXPECT_EQ(sinkhorn_normalize(p, 0), p);
}

TEST(Sinkhorn, RejectsNonPositive) {
  Matrix p = Matrix::Ones(3, 3);
  p(2, 1) = 0.0;
  EXPECT_THROW(sinkhorn_normalize(p, 5), ContractViolation);
}

TEST(EigenAngles, BlockRotationSpectrum) {
  // diag(R(0.3), R(2.0), -1, 1) conjugated by a random orthogonal basis.
  Matrix d = Matrix::Zero(6, 6);
  auto rot = [&](Index at, double t) {
    d(at, at) = std::cos(t);
    d(at, at + 1) = -std::sin(t);
    d(at + 1, at) = std::sin(t);
    d(at + 1, at + 1) = std::cos(t);
  };
  rot(0, 0.3);
  rot(2, 2.0);
  d(4, 4) = -1.0;
  d(5, 5) = 1.0;
  Rng rng(10);
  const Matrix q = random_orthogonal(6, rng);
  const std::vector<double> got = eigen_angles(q * d * q.transpose());
  std::vector<double> want = {0.0, 0.3, 2.0, std::numbers::pi, 2 * std::numbers::pi - 2.0,
                              2 * std::numbers::pi - 0.3};
  ASSERT_EQ(got.size(), want.size());
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-9);
}

TEST(EigenAngles, IdentityIsAllZero) {
  for (double a : eigen_angles(Matrix::Identity(5, 5))) EXPECT_EQ(a, 0.0);
}

TEST(EigenAngles, RejectsNonOrthogonal) {
  EXPECT_THROW(eigen_angles(2.0 * Matrix::Identity(3, 3)), ContractViolation);
}

TEST(Permutation, MatrixFormAndComposition) {
  Rng rng(13);
  const Permutation p = Permutation::random(6, rng), q = Permutation::random(6, rng);
  const Matrix x = rng.normal_matrix(6, 4);
  EXPECT_EQ(p.permute_rows(x), p.matrix() * x);
  EXPECT_EQ(p.permute_cols(x.transpose()), x.transpose() * p.matrix().transpose());
  EXPECT_EQ(p.then(q).matrix(), q.matrix() * p.matrix());
  EXPECT_TRUE(p.then(p.inverse()).is_identity());
}

TEST(Permutation, RejectsNonBijection) {
  EXPECT_THROW(Permutation(std::vector<Index>{0, 0, 1}), InvariantViolation);
  EXPECT_THROW(Permutation(std::vector<Index>{0, 3}), InvariantViolation);
}

TEST(Rng, DirichletLiesOnSimplex) {
  Rng rng(14);
  for (double alpha : {0.05, 0.1, 1.0, 5.0}) {
    for (int k = 0; k < 50; ++k) {
      const std::vector<double> w = rng.dirichlet(4, alpha);
      double total = 0.0;
      for (double x : w) {
        EXPECT_GE(x, 0.0);
        total += x;
      }
      EXPECT_NEAR(total, 1.0, 1e-12);
    }
  }
}
