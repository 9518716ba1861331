#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "mmmpp/derived.hpp"
#include "support/oracles.hpp"

using namespace mmmpp;
using Index = Eigen::Index;

namespace {

// Published coefficients on the log scale of q_12 and q_21 with covariates
// sex, mild ACCI and (standardized) age.
FitResult published_fit(bool with_covariance = true) {
  ModelSpec spec;
  spec.n_states = 2;
  spec.q_formula = {"sex", "acci_mild", "age"};
  FitResult f;
  f.spec = spec;
  Parameters p = default_parameters(spec);
  p.delta = {0.707, 0.293};
  p.q[0][1] = {std::exp(-3.87), {-0.02, -0.11, 0.08}};
  p.q[1][0] = {std::exp(-4.55), {-0.62, -0.45, -0.07}};
  p.lambda[0].base = 0.123;
  p.lambda[1].base = 0.029;
  p.marks[0].natural = {80.9, 85.0, 0.726};
  p.marks[1].natural = {124.5, 116.9, 0.370};
  f.estimates = p;
  f.working_estimates = to_working(p, spec);
  if (with_covariance) {
    const Index k = f.working_estimates.size();
    f.covariance = Matrix::Identity(k, k) * 0.004;
    f.information_positive_definite = true;
    f.standard_errors = f.covariance.diagonal().cwiseSqrt();
  }
  return f;
}

Matrix two_state(double q12, double q21) {
  Matrix q(2, 2);
  q << -q12, q12, q21, -q21;
  return q;
}

GroupProfile profile(const std::string& label, double sex, double mild, double age = 0.0) {
  return {label, {{"sex", sex}, {"acci_mild", mild}, {"age", age}}};
}

double rel(double got, double want) { return std::abs(got / want - 1.0); }

}  // namespace

TEST(ExpectedDurations, ReferenceAndGroups) {
  const Vector d = expected_durations(two_state(0.02088, 0.01057));
  EXPECT_NEAR(d[0], 47.9, 0.05);
  EXPECT_NEAR(d[1], 94.6, 0.05);
  EXPECT_LT(rel(d[0], 48.2), 0.02);
  EXPECT_LT(rel(d[1], 94.2), 0.02);

  const Vector male = expected_durations(two_state(std::exp(-3.87 - 0.02), std::exp(-4.55 - 0.62)));
  EXPECT_NEAR(male[1], std::exp(4.55 + 0.62), 1e-10);
  EXPECT_NEAR(male[1], 175.9, 0.05);
  EXPECT_LT(rel(male[1], 175.1), 0.02);

  const Vector mild = expected_durations(two_state(std::exp(-3.87 - 0.11), std::exp(-4.55 - 0.45)));
  EXPECT_NEAR(mild[0], 53.5, 0.05);
}

TEST(ExpectedDurations, AbsorbingStateIsInfinite) {
  const Vector d = expected_durations(two_state(0.1, 0.0));
  EXPECT_DOUBLE_EQ(d[0], 10.0);
  EXPECT_EQ(d[1], std::numeric_limits<double>::infinity());
}

TEST(StationaryDistribution, SymmetricAndReference) {
  const Vector sym = stationary_distribution(two_state(0.3, 0.3));
  EXPECT_NEAR(sym[0], 0.5, 1e-15);
  EXPECT_NEAR(sym[1], 0.5, 1e-15);

  const Vector ref = stationary_distribution(two_state(0.02088, 0.01057));
  EXPECT_NEAR(ref[0], 0.01057 / (0.02088 + 0.01057), 1e-14);
  EXPECT_NEAR(ref[0], 0.336, 0.0005);
  EXPECT_LT(rel(ref[0], 0.338), 0.02);

  const Vector male = stationary_distribution(two_state(std::exp(-3.87 - 0.02), std::exp(-4.55 - 0.62)));
  EXPECT_LT(rel(male[0], 0.219), 0.02);
}

TEST(StationaryDistribution, BalanceAndRatioIdentity) {
  oracle::InstanceGenerator gen(51);
  for (int rep = 0; rep < 100; ++rep) {
    const std::size_t n = gen.pick(1, 7);
    const Matrix q = gen.generator(n, gen.unif(1e-3, 10.0));
    const Vector pi = stationary_distribution(q);
    EXPECT_LE((pi.transpose() * q).cwiseAbs().maxCoeff(), 1e-12 * std::max(1.0, q.cwiseAbs().maxCoeff()));
    EXPECT_NEAR(pi.sum(), 1.0, 1e-12);
    EXPECT_GE(pi.minCoeff(), 0.0);
  }
  for (int rep = 0; rep < 50; ++rep) {
    const double q12 = std::exp(gen.unif(-8.0, 1.0)), q21 = std::exp(gen.unif(-8.0, 1.0));
    const Vector pi = stationary_distribution(two_state(q12, q21));
    EXPECT_NEAR((pi[0] / pi[1]) / (q21 / q12), 1.0, 1e-12);
  }
}

TEST(StationaryDistribution, ReducibleChainNamesStates) {
  Matrix q = Matrix::Zero(3, 3);
  q(0, 1) = 0.2;
  q(1, 0) = 0.1;
  q(2, 0) = 0.5;
  for (Index i = 0; i < 3; ++i) q(i, i) = -q.row(i).sum();
  try {
    stationary_distribution(q);
    FAIL();
  } catch (const ReducibleChain& e) {
    EXPECT_NE(std::string(e.what()).find("3"), std::string::npos);
    EXPECT_EQ(e.kind(), "reducible-chain");
  }
}

TEST(GroupTable, ReproducesSexAndAcciRows) {
  const FitResult f = published_fit();
  const auto rows = group_table(f, {profile("reference", 0, 0), profile("male", 1, 0), profile("mild", 0, 1)},
                                {2000, 1, 0.95});
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_LT(rel(rows[0].durations[0], 48.2), 0.02);
  EXPECT_LT(rel(rows[0].durations[1], 94.2), 0.02);
  EXPECT_LT(rel(rows[1].durations[0], 49.1), 0.02);
  EXPECT_LT(rel(rows[1].durations[1], 175.1), 0.02);
  EXPECT_LT(rel(rows[2].durations[0], 53.5), 0.02);
  EXPECT_LT(rel(rows[2].durations[1], 148.3), 0.02);
  EXPECT_LT(rel(rows[0].shares[0], 0.338), 0.02);
  EXPECT_LT(rel(rows[0].shares[1], 0.662), 0.02);
  EXPECT_LT(rel(rows[1].shares[0], 0.219), 0.02);
  EXPECT_LT(rel(rows[2].shares[0], 0.265), 0.02);
  for (const auto& row : rows) {
    ASSERT_EQ(row.duration_ci.size(), 2u);
    for (Index i = 0; i < 2; ++i) {
      EXPECT_LT(row.duration_ci[static_cast<std::size_t>(i)].lower, row.durations[i]);
      EXPECT_GT(row.duration_ci[static_cast<std::size_t>(i)].upper, row.durations[i]);
      EXPECT_LT(row.share_ci[static_cast<std::size_t>(i)].lower, row.shares[i]);
      EXPECT_GT(row.share_ci[static_cast<std::size_t>(i)].upper, row.shares[i]);
    }
  }
}

TEST(GroupTable, DuplicateProfilesGiveIdenticalRows) {
  const auto rows = group_table(published_fit(), {profile("a", 1, 1, 0.5), profile("b", 1, 1, 0.5)});
  EXPECT_EQ(rows[0].durations, rows[1].durations);
  EXPECT_EQ(rows[0].shares, rows[1].shares);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(rows[0].duration_ci[i].lower, rows[1].duration_ci[i].lower);
    EXPECT_EQ(rows[0].share_ci[i].upper, rows[1].share_ci[i].upper);
  }
}

TEST(GroupTable, MissingCovariateIsNamed) {
  try {
    group_table(published_fit(), {GroupProfile{"partial", {{"sex", 1.0}, {"age", 0.0}}}});
    FAIL();
  } catch (const CovariateError& e) {
    EXPECT_EQ(e.name(), "acci_mild");
    EXPECT_NE(std::string(e.what()).find("partial"), std::string::npos);
  }
}

TEST(GroupTable, WithoutCovarianceOnlyPointValues) {
  const auto rows = group_table(published_fit(false), {profile("reference", 0, 0)});
  EXPECT_TRUE(rows[0].duration_ci.empty());
  EXPECT_NEAR(rows[0].durations[0], std::exp(3.87), 1e-9);
}

TEST(GroupTable, IntervalWidthsHalveWithQuarterCovariance) {
  FitResult f = published_fit();
  const auto wide = group_table(f, {profile("male", 1, 0)}, {20000, 5, 0.95});
  f.covariance /= 4.0;
  f.standard_errors /= 2.0;
  const auto narrow = group_table(f, {profile("male", 1, 0)}, {20000, 5, 0.95});
  for (std::size_t i = 0; i < 2; ++i) {
    const double dw = wide[0].duration_ci[i].upper - wide[0].duration_ci[i].lower;
    const double dn = narrow[0].duration_ci[i].upper - narrow[0].duration_ci[i].lower;
    EXPECT_NEAR(dn / dw, 0.5, 0.03) << i;
    const double sw = wide[0].share_ci[i].upper - wide[0].share_ci[i].lower;
    const double sn = narrow[0].share_ci[i].upper - narrow[0].share_ci[i].lower;
    EXPECT_NEAR(sn / sw, 0.5, 0.03) << i;
  }
}

TEST(EffectCurve, FlatWithoutCoefficient) {
  FitResult f = published_fit();
  f.estimates.q[0][1].slopes[2] = 0.0;
  f.estimates.q[1][0].slopes[2] = 0.0;
  f.working_estimates = to_working(f.estimates, f.spec);
  const auto curve = effect_curve(f, "age", {-2.0, -1.0, 0.0, 1.0, 2.0}, profile("base", 0, 0));
  for (const auto& pt : curve) EXPECT_EQ(pt.point, curve[0].point);
}

TEST(EffectCurve, MonotoneInOppositeSignedSlopes) {
  // pi_1 = q21 / (q12 + q21) falls as q12 grows and as q21 shrinks, so a
  // positive slope on q12 with a negative one on q21 gives a decreasing
  // curve; flipping both signs makes it increasing.
  FitResult f = published_fit(false);
  const std::vector<double> grid{-3.0, -1.5, 0.0, 0.5, 1.0, 2.5};
  auto curve = effect_curve(f, "age", grid, profile("base", 0, 0));
  for (std::size_t g = 1; g < grid.size(); ++g) EXPECT_LT(curve[g].point, curve[g - 1].point);
  f.estimates.q[0][1].slopes[2] = -0.08;
  f.estimates.q[1][0].slopes[2] = 0.07;
  curve = effect_curve(f, "age", grid, profile("base", 0, 0));
  for (std::size_t g = 1; g < grid.size(); ++g) EXPECT_GT(curve[g].point, curve[g - 1].point);
}

TEST(EffectCurve, PublishedAgeRange) {
  const auto curve = effect_curve(published_fit(), "age", {-3.1, 0.0, 2.2}, profile("base", 0, 0), {4000, 2, 0.95});
  EXPECT_NEAR(curve[0].point, 0.443, 0.01);
  EXPECT_NEAR(curve[2].point, 0.273, 0.01);
  for (const auto& pt : curve) {
    ASSERT_TRUE(pt.ci.has_value());
    EXPECT_LT(pt.ci->lower, pt.point);
    EXPECT_GT(pt.ci->upper, pt.point);
  }
  EXPECT_EQ(curve[1].value, 0.0);
}

TEST(EffectCurve, EmptyGridIsAnError) {
  EXPECT_THROW(effect_curve(published_fit(), "age", {}, profile("base", 0, 0)), DomainError);
}
