#include "gradcheck.hpp"

#include <gtest/gtest.h>

using namespace rebasin;
using namespace rebasin::testing;

class OpGradient : public ::testing::TestWithParam<std::size_t> {};

TEST_P(OpGradient, MatchesFiniteDifferences) {
  const OpCase c = op_cases()[GetParam()];
  for (std::uint64_t seed = 1; seed <= 5; ++seed)
    EXPECT_LE(gradcheck(random_inputs(c, seed), c.build, seed), 1e-4) << c.name << " seed " << seed;
}

INSTANTIATE_TEST_SUITE_P(AllOps, OpGradient, ::testing::Range<std::size_t>(0, op_cases().size()),
                         [](const ::testing::TestParamInfo<std::size_t>& info) { return op_cases()[info.param].name; });

TEST(LearnedObjective, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 1; seed <= 2; ++seed) {
    EXPECT_LE(learned_objective_gradcheck(seed, HeadSpace::circuits), 1e-4);
    EXPECT_LE(learned_objective_gradcheck(seed, HeadSpace::weights), 1e-4);
  }
}

TEST(Tape, SharedSubexpressionAccumulates) {
  ad::Tape t;
  Matrix x0(1, 1);
  x0 << 3.0;
  const ad::Var x = t.leaf(x0);
  const ad::Var y = ad::sum(ad::hadamard(x, x));  // x²
  EXPECT_DOUBLE_EQ(t.backward(y)[x](0, 0), 6.0);
}

TEST(Tape, ConstantsReceiveZeroGradient) {
  ad::Tape t;
  const ad::Var a = t.leaf(Matrix::Ones(2, 2));
  const ad::Var b = t.constant(Matrix::Ones(2, 2));
  const ad::Gradients g = t.backward(ad::sum(ad::add(a, b)));
  EXPECT_EQ(g[a], Matrix::Ones(2, 2));
  EXPECT_EQ(g[b], Matrix::Zero(2, 2));
}

TEST(Ops, ShapeErrors) {
  ad::Tape t;
  const ad::Var a = t.leaf(Matrix::Ones(2, 3));
  const ad::Var b = t.leaf(Matrix::Ones(2, 3));
  EXPECT_THROW(ad::matmul(a, b), ContractViolation);
  EXPECT_THROW(ad::add(a, t.leaf(Matrix::Ones(3, 2))), ContractViolation);
  EXPECT_THROW(ad::attention(a, b, b, 2, 2, 2, true), ContractViolation);
}

TEST(Ops, SoftmaxRowsSumToOne) {
  ad::Tape t;
  Rng rng(2);
  const Matrix s = ad::row_softmax(t.constant(rng.normal_matrix(4, 7, 5.0))).value();
  EXPECT_LT((s.rowwise().sum().array() - 1.0).abs().maxCoeff(), 1e-12);
}

TEST(Ops, CrossEntropyIgnoresNegativeTargets) {
  ad::Tape t;
  Matrix logits = Matrix::Zero(2, 4);
  logits(1, 2) = 50.0;
  const std::vector<std::int32_t> targets = {-1, 2};
  EXPECT_NEAR(ad::cross_entropy(t.constant(logits), targets).value()(0, 0), 0.0, 1e-12);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  // With bias correction the first update is lr·sign(g) up to eps.
  std::vector<Matrix> p = {Matrix::Zero(2, 2)};
  Matrix g(2, 2);
  g << 1.0, -2.0, 0.5, -0.1;
  ad::AdamState state;
  ad::adam_step(p, std::vector<Matrix>{g}, state, {.lr = 0.1});
  Matrix want(2, 2);
  want << -0.1, 0.1, -0.1, 0.1;
  EXPECT_LT((p[0] - want).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Adam, MinimizesQuadratic) {
  std::vector<Matrix> p = {Matrix::Constant(3, 1, 5.0)};
  ad::AdamState state;
  for (int k = 0; k < 2000; ++k) ad::adam_step(p, std::vector<Matrix>{2.0 * p[0]}, state, {.lr = 0.05});
  EXPECT_LT(p[0].cwiseAbs().maxCoeff(), 1e-2);
}

TEST(Adam, RejectsNonFiniteGradient) {
  std::vector<Matrix> p = {Matrix::Zero(1, 1)};
  ad::AdamState state;
  EXPECT_THROW(ad::adam_step(p, std::vector<Matrix>{Matrix::Constant(1, 1, NAN)}, state, {}), NumericError);
}
