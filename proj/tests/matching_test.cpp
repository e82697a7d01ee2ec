#include "test_util.hpp"

#include "rebasin/barrier.hpp"
#include "rebasin/linalg.hpp"
#include "rebasin/matching.hpp"

using namespace rebasin;
using namespace rebasin::testing;

namespace {

std::vector<Batch> probe_data(const TransformerConfig& c, std::uint64_t seed, int batches = 2) {
  std::vector<Batch> d;
  for (int i = 0; i < batches; ++i) d.push_back(random_batch(c, 8, seed + 10 * i));
  return d;
}

}  // namespace

TEST(WeightMatch, RecoversPlantedSymmetry) {
  const TransformerConfig c = tiny_config();
  for (std::uint64_t seed = 1; seed <= 4; ++seed) {
    const TransformerParams a = absorbed_params(c, seed);
    Rng rng(seed + 100);
    const TransformerParams b = apply_alignment(a, c, AlignmentMaps::random(c, rng));
    const MatchResult r = weight_match(a, b, c, 5);
    EXPECT_LT(max_abs_diff(apply_alignment(b, c, r.maps), a), 1e-9) << "seed " << seed;
    for (std::size_t k = 1; k < r.objective.size(); ++k) EXPECT_GE(r.objective[k], r.objective[k - 1] - 1e-9);
  }
}

TEST(WeightMatch, ObjectiveNeverDecreasesOnUnrelatedModels) {
  const TransformerConfig c = tiny_config(Activation::gelu);
  for (std::uint64_t seed = 1; seed <= 4; ++seed) {
    const TransformerParams a = absorbed_params(c, seed), b = absorbed_params(c, seed + 50);
    const MatchResult r = weight_match(a, b, c, 8);
    ASSERT_FALSE(r.objective.empty());
    for (std::size_t k = 1; k < r.objective.size(); ++k) EXPECT_GE(r.objective[k], r.objective[k - 1] - 1e-9);
    EXPECT_GE(inner_product(a, apply_alignment(b, c, r.maps)), inner_product(a, b) - 1e-9);
    EXPECT_LT(orthogonality_error(r.maps.o), 1e-10);
  }
}

TEST(WeightMatch, SelfMatchIsIdentity) {
  const TransformerConfig c = tiny_config();
  const TransformerParams a = absorbed_params(c, 3);
  const MatchResult r = weight_match(a, a, c, 3);
  EXPECT_LT(max_abs_diff(apply_alignment(a, c, r.maps), a), 1e-10);
  EXPECT_TRUE(r.converged);
}

TEST(WeightMatch, RequiresAbsorbedModels) {
  const TransformerConfig c = tiny_config();
  EXPECT_THROW(weight_match(random_params(c, 1), random_params(c, 2), c), ContractViolation);
}

TEST(ActivationMatch, RecoversPlantedSymmetry) {
  const TransformerConfig c = tiny_config();
  const TransformerParams a = absorbed_params(c, 5);
  Rng rng(5);
  const TransformerParams b = apply_alignment(a, c, AlignmentMaps::random(c, rng));
  const MatchResult r = activation_match(a, b, c, probe_data(c, 1));
  const TransformerParams moved = apply_alignment(b, c, r.maps);
  EXPECT_LT(max_abs_diff(moved, a), 1e-6);
}

TEST(LearnedMatch, PlantedPairStaysNearZeroBarrier) {
  const TransformerConfig c = tiny_config();
  const TransformerParams a = absorbed_params(c, 6);
  Rng rng(6);
  const TransformerParams b = apply_alignment(a, c, AlignmentMaps::random(c, rng));
  MatchConfig mc;
  mc.method = MatchMethod::learned;
  mc.learn_iterations = 20;
  mc.lr = 1e-3;
  const auto data = probe_data(c, 2);
  const MatchResult r = learned_match(a, b, c, data, mc);
  EXPECT_LT(barrier(a, apply_alignment(b, c, r.maps), c, data, 5).barrier, 1e-3);
}

TEST(LearnedMatch, ProgressCallbackAndReproducibility) {
  const TransformerConfig c = tiny_config();
  const TransformerParams a = absorbed_params(c, 7), b = absorbed_params(c, 8);
  MatchConfig mc;
  mc.method = MatchMethod::learned;
  mc.learn_iterations = 12;
  mc.lr = 1e-2;
  mc.log_every = 4;
  mc.seed = 3;
  const auto data = probe_data(c, 3);
  std::vector<Index> steps;
  const MatchResult r1 = learned_match(a, b, c, data, mc, [&](Index s, const AlignmentMaps& m) {
    steps.push_back(s);
    m.validate(c);
  });
  EXPECT_EQ(steps, (std::vector<Index>{0, 4, 8, 12}));  // final maps are reported too
  const MatchResult r2 = learned_match(a, b, c, data, mc);
  EXPECT_EQ(r1.maps.o, r2.maps.o);
  for (std::size_t l = 0; l < r1.maps.ffn.size(); ++l) EXPECT_EQ(r1.maps.ffn[l], r2.maps.ffn[l]);
}

TEST(LearnedMatch, RejectsEmptyData) {
  const TransformerConfig c = tiny_config();
  MatchConfig mc;
  mc.method = MatchMethod::learned;
  EXPECT_THROW(learned_match(absorbed_params(c, 1), absorbed_params(c, 2), c, {}, mc), ContractViolation);
}

TEST(SoftMatch, ReportsEndpointNonEquivalence) {
  const TransformerConfig c = tiny_config();
  const TransformerParams a = absorbed_params(c, 9), b = absorbed_params(c, 10);
  MatchConfig mc;
  mc.method = MatchMethod::soft;
  mc.learn_iterations = 15;
  mc.lr = 5e-2;
  mc.noise = 0.5;
  const SoftMatchResult r = soft_learned_match(a, b, c, probe_data(c, 4), mc);
  for (const Matrix& p : r.soft.ffn) {
    EXPECT_LT((p.rowwise().sum().array() - 1.0).abs().maxCoeff(), 1e-6);
    EXPECT_LT((p.colwise().sum().array() - 1.0).abs().maxCoeff(), 1e-6);
  }
  EXPECT_LT(orthogonality_error(r.soft.o), 1e-9);
  EXPECT_GT(r.endpoint_deviation, 1e-6);
  EXPECT_FALSE(r.warnings.empty());
  r.hard.validate(c);
}

TEST(SoftMatch, HardMapsGiveExactSoftAlignment) {
  // A soft alignment built from hard permutations is the ordinary alignment.
  const TransformerConfig c = tiny_config();
  const TransformerParams b = absorbed_params(c, 11);
  Rng rng(11);
  const AlignmentMaps m = AlignmentMaps::random(c, rng);
  SoftMaps s{m.o, {}, {}};
  for (const Permutation& p : m.ffn) s.ffn.push_back(p.matrix());
  for (const SemiPermutation& h : m.heads) s.heads.push_back(h.matrix());
  EXPECT_LT(max_abs_diff(apply_soft_alignment(b, c, s), apply_alignment(b, c, m)), 1e-12);
}

TEST(Samplers, RangesAndDeterminism) {
  Rng rng(1);
  for (int k = 0; k < 200; ++k) {
    EXPECT_EQ(sample_lambda(LambdaSampler::fixed_half, rng), 0.5);
    const double n = sample_lambda(LambdaSampler::uniform_narrow, rng);
    EXPECT_GE(n, 0.4);
    EXPECT_LE(n, 0.6);
    const double f = sample_lambda(LambdaSampler::uniform_full, rng);
    EXPECT_GE(f, 0.0);
    EXPECT_LE(f, 1.0);
    const double g = sample_lambda(LambdaSampler::gaussian, rng);
    EXPECT_GE(g, 0.0);
    EXPECT_LE(g, 1.0);
  }
  for (const char* s : {"fixed-0.5", "uniform-0.4-0.6", "uniform-0-1", "gaussian-0.5-0.1"})
    EXPECT_STREQ(to_string(parse_sampler(s)), s);
  EXPECT_THROW(parse_sampler("beta"), ConfigError);
}

TEST(MatchConfig, ValidateRejectsBadValues) {
  MatchConfig mc;
  mc.lr = 0.0;
  EXPECT_THROW(mc.validate(), ConfigError);
  mc = {};
  mc.wm_iterations = 0;
  EXPECT_THROW(mc.validate(), ConfigError);
  EXPECT_THROW(parse_method("telepathy"), ConfigError);
}

TEST(MatchModels, VanillaIsIdentity) {
  const TransformerConfig c = tiny_config();
  MatchConfig mc;
  mc.method = MatchMethod::vanilla;
  const MatchResult r = match_models(absorbed_params(c, 1), absorbed_params(c, 2), c, {}, mc);
  EXPECT_EQ(r.maps.o, Matrix::Identity(c.d_model, c.d_model));
  for (const Permutation& p : r.maps.ffn) EXPECT_TRUE(p.is_identity());
}

TEST(AngleAnalysis, IdenticalMapsHaveZeroDifference) {
  Rng rng(3);
  const Matrix o = random_orthogonal(6, rng);
  const AngleReport r = orthogonal_diff_analysis(o, o);
  for (double a : r.angles_diff) EXPECT_NEAR(a, 0.0, 1e-9);
  EXPECT_NEAR(r.resultant_diff, 1.0, 1e-12);
  EXPECT_NEAR(r.mean_cos_diff, 1.0, 1e-12);
  EXPECT_EQ(r.angles_wm.size(), 6u);
}
