#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "mmmpp/likelihood.hpp"
#include "support/oracles.hpp"

using namespace mmmpp;

namespace {

ModelSpec intercept_spec(std::size_t n, Censoring c = Censoring::kEventTerminated) {
  ModelSpec s;
  s.n_states = n;
  s.censoring = c;
  return s;
}

Parameters table_parameters() {
  Parameters p = default_parameters(intercept_spec(2));
  p.delta = {0.707, 0.293};
  p.q[0][1].base = std::exp(-3.87);
  p.q[1][0].base = std::exp(-4.55);
  p.lambda[0].base = 0.123;
  p.lambda[1].base = 0.029;
  p.marks[0].natural = {80.9, 85.0, 0.726};
  p.marks[1].natural = {124.5, 116.9, 0.370};
  return p;
}

double oracle_value(const Parameters& p, const PatientRecord& r, double tail = 0.0) {
  return static_cast<double>(
      oracle::log_likelihood(oracle::from_parameters(p), r.times, r.marks, r.has_initial_mark, tail));
}

}  // namespace

TEST(BuildSegments, NoTimeVaryingCovariates) {
  const ModelSpec spec = intercept_spec(2);
  PatientRecord r;
  r.times = {0.0, 3.5, 10.0};
  r.marks = {0.0, 1.0, 2.0};
  const auto segs = build_segments(r, table_parameters(), spec, 2);
  ASSERT_EQ(segs.size(), 1u);
  EXPECT_DOUBLE_EQ(segs[0].duration, 6.5);
  EXPECT_THROW(build_segments(r, table_parameters(), spec, 0), DomainError);
  EXPECT_THROW(build_segments(r, table_parameters(), spec, 3), DomainError);
}

TEST(BuildSegments, BreakpointsPartitionTheInterval) {
  ModelSpec spec = intercept_spec(2);
  spec.q_formula = {"z"};
  Parameters p = default_parameters(spec);
  p.q[0][1].slopes = {0.5};
  p.q[1][0].slopes = {-0.25};
  PatientRecord r;
  r.times = {0.0, 0.1, 0.7};
  r.marks = {0.0, 0.0, 0.0};
  r.piecewise_covariates["z"] = {{0.0, 0.3, 0.7}, {0.0, 1.0, 2.0}};

  auto segs = build_segments(r, p, spec, 2);
  ASSERT_EQ(segs.size(), 2u);
  EXPECT_EQ(segs[0].duration + segs[1].duration, 0.7 - 0.1);
  EXPECT_NEAR(segs[0].duration, 0.2, 1e-15);
  EXPECT_NEAR(segs[1].q(0, 1), std::exp(0.5), 1e-15);

  // A breakpoint at the right end belongs to the next interval.
  EXPECT_EQ(build_segments(r, p, spec, 1).size(), 1u);
  r.times = {0.0, 0.3, 0.7};
  segs = build_segments(r, p, spec, 2);
  ASSERT_EQ(segs.size(), 1u);
  EXPECT_NEAR(segs[0].q(1, 0), std::exp(-0.25), 1e-15);
}

TEST(BuildSegments, UncoveredStepFunctionIsAnError) {
  ModelSpec spec = intercept_spec(2);
  spec.q_formula = {"z"};
  PatientRecord r;
  r.times = {0.0, 5.0};
  r.marks = {0.0, 0.0};
  r.piecewise_covariates["z"] = {{1.0}, {0.0}};
  EXPECT_THROW(build_segments(r, default_parameters(spec), spec, 1), CoverageError);
  EXPECT_THROW(log_likelihood(default_parameters(spec), r, spec), CoverageError);
}

TEST(ForwardStep, SingleStateIncrement) {
  const double lambda = 0.123, x = 17.0, logf = -4.2;
  ForwardState st{RowVector::Ones(1), 0.0};
  Segment s{x, Matrix::Zero(1, 1), Vector::Constant(1, lambda)};
  const auto next = forward_step(st, {s}, Vector::Constant(1, lambda), Vector::Constant(1, logf));
  EXPECT_DOUBLE_EQ(next.alpha[0], 1.0);
  EXPECT_NEAR(next.log_scale, std::log(lambda) - lambda * x + logf, 1e-14);
}

TEST(ForwardStep, ZeroDurationLimit) {
  const Parameters p = table_parameters();
  ForwardState st{RowVector(2), 1.5};
  st.alpha << 0.3, 0.7;
  const Matrix q = intensity_matrix(p, std::vector<double>{});
  const Vector lam = event_rates(p, std::vector<double>{});
  const Vector logf(Vector::Map(std::vector<double>{-3.0, -5.0}.data(), 2));
  const auto next = forward_step(st, {Segment{0.0, q, lam}}, lam, logf);
  const double want = std::log(0.3 * 0.123 * std::exp(-3.0) + 0.7 * 0.029 * std::exp(-5.0));
  EXPECT_NEAR(next.log_scale - 1.5, want, 1e-14);
  EXPECT_NEAR(next.alpha.sum(), 1.0, 1e-15);
}

TEST(ForwardStep, ImpossibleObservationCarriesIndex) {
  ForwardState st{RowVector::Constant(2, 0.5), 0.0};
  const Parameters p = table_parameters();
  const Matrix q = intensity_matrix(p, std::vector<double>{});
  const Vector lam = event_rates(p, std::vector<double>{});
  const Vector logf = Vector::Constant(2, -std::numeric_limits<double>::infinity());
  try {
    forward_step(st, {Segment{3.0, q, lam}}, lam, logf, 7);
    FAIL();
  } catch (const ImpossibleObservation& e) {
    EXPECT_EQ(e.tau(), 7u);
  }
}

TEST(LogLikelihood, ImpossibleMarkRaisesInsteadOfMinusInfinity) {
  Parameters p = table_parameters();
  // Very narrow gammas: a huge mark underflows both densities to zero.
  p.marks[0].natural = {0.01, 0.001, 0.5};
  p.marks[1].natural = {0.02, 0.001, 0.5};
  PatientRecord r;
  r.id = "p9";
  r.times = {0.0, 4.0, 9.0};
  r.marks = {0.0, 1e305, 0.0};
  try {
    log_likelihood(p, r, intercept_spec(2));
    FAIL();
  } catch (const ImpossibleObservation& e) {
    EXPECT_EQ(e.tau(), 1u);
    EXPECT_EQ(e.record_id(), "p9");
  }
}

TEST(LogLikelihood, SingleStateClosedForm) {
  oracle::InstanceGenerator gen(31);
  const ModelSpec spec = intercept_spec(1);
  for (int rep = 0; rep < 50; ++rep) {
    const Parameters p = gen.parameters(spec);
    const PatientRecord r = gen.record(gen.pick(0, 200));
    const double lambda = p.lambda[0].base;
    double want = static_cast<double>(r.n_intervals()) * std::log(lambda) - lambda * r.times.back();
    for (double y : r.marks) want += zag_logdensity(y, {p.marks[0].natural[2], p.marks[0].natural[0], p.marks[0].natural[1]});
    EXPECT_NEAR(log_likelihood(p, r, spec), want, 1e-10 * std::max(1.0, std::abs(want)));
  }
}

TEST(LogLikelihood, HandPickedTableInstance) {
  PatientRecord r;
  r.times = {0.0, 2.0, 30.0, 31.0};
  r.marks = {0.0, 45.0, 0.0, 210.0};
  const double got = log_likelihood(table_parameters(), r, intercept_spec(2));
  EXPECT_NEAR(got, oracle_value(table_parameters(), r), 1e-12 * std::abs(got));
}

TEST(LogLikelihood, MatchesUnscaledOracle) {
  oracle::InstanceGenerator gen(32);
  for (int rep = 0; rep < 60; ++rep) {
    const ModelSpec spec = intercept_spec(1 + static_cast<std::size_t>(rep % 3));
    const Parameters p = gen.parameters(spec);
    const PatientRecord r = gen.record(gen.pick(1, 200));
    const double want = oracle_value(p, r);
    EXPECT_NEAR(log_likelihood(p, r, spec), want, 1e-8 * std::abs(want)) << "rep " << rep;
  }
}

TEST(LogLikelihood, LongGapsDoNotUnderflow) {
  Parameters p = table_parameters();
  PatientRecord r;
  r.times = {0.0, 9000.0, 20000.0};
  r.marks = {10.0, 0.0, 50.0};
  const double got = log_likelihood(p, r, intercept_spec(2));
  EXPECT_TRUE(std::isfinite(got));
  EXPECT_NEAR(got, oracle_value(p, r), 1e-10 * std::abs(got));
}

TEST(LogLikelihood, NoInitialMark) {
  oracle::InstanceGenerator gen(33);
  const ModelSpec spec = intercept_spec(2);
  const Parameters p = gen.parameters(spec);
  PatientRecord r = gen.record(20);
  r.has_initial_mark = false;
  r.marks[0] = std::numeric_limits<double>::quiet_NaN();
  const double want = oracle_value(p, r);
  EXPECT_NEAR(log_likelihood(p, r, spec), want, 1e-10 * std::abs(want));
}

TEST(LogLikelihood, TailCensoringAddsSurvivalFactor) {
  oracle::InstanceGenerator gen(34);
  const ModelSpec tail_spec = intercept_spec(2, Censoring::kIntervalCensoredTail);
  for (int rep = 0; rep < 10; ++rep) {
    const Parameters p = gen.parameters(tail_spec);
    PatientRecord r = gen.record(gen.pick(1, 40));
    const double extra = gen.unif(1.0, 400.0);
    r.followup_end = r.times.back() + extra;
    const double want = oracle_value(p, r, extra);
    EXPECT_NEAR(log_likelihood(p, r, tail_spec), want, 1e-9 * std::abs(want));
    // The default option ignores follow-up beyond the last event.
    EXPECT_NEAR(log_likelihood(p, r, intercept_spec(2)), oracle_value(p, r), 1e-9 * std::abs(want));
  }
}

TEST(LogLikelihood, StoredTermsAgreeWithStreaming) {
  oracle::InstanceGenerator gen(35);
  const ModelSpec spec = intercept_spec(3, Censoring::kIntervalCensoredTail);
  const Parameters p = gen.parameters(spec);
  PatientRecord r = gen.record(50);
  r.followup_end = r.times.back() + 33.0;
  const double streamed = log_likelihood(p, r, spec);
  EXPECT_NEAR(log_likelihood(p, record_terms(p, r, spec), r), streamed, 1e-12 * std::abs(streamed));
}

TEST(LogLikelihood, PermutationInvariance) {
  oracle::InstanceGenerator gen(36);
  const std::vector<std::vector<std::size_t>> perms{{1, 0, 2}, {2, 0, 1}, {2, 1, 0}};
  const ModelSpec spec = intercept_spec(3);
  for (int rep = 0; rep < 10; ++rep) {
    const Parameters p = gen.parameters(spec);
    const PatientRecord r = gen.record(gen.pick(1, 150));
    const double base = log_likelihood(p, r, spec);
    for (const auto& perm : perms)
      EXPECT_NEAR(log_likelihood(permute_states(p, perm), r, spec), base, 1e-10 * std::abs(base));
  }
}

TEST(LogLikelihood, SplittingIntervalsWithConstantCovariates) {
  oracle::InstanceGenerator gen(37);
  ModelSpec spec = intercept_spec(2);
  spec.q_formula = {"z"};
  spec.lambda_formula = {"z"};
  for (int rep = 0; rep < 10; ++rep) {
    Parameters p = gen.parameters(spec);
    p.q[0][1].slopes = {0.4};
    p.q[1][0].slopes = {-0.3};
    p.lambda[0].slopes = {0.2};
    p.lambda[1].slopes = {0.1};
    PatientRecord whole = gen.record(gen.pick(5, 100));
    whole.static_covariates["z"] = 0.8;
    PatientRecord split = whole;
    split.static_covariates.clear();
    StepFunction fn;
    for (double t = 0.0; t < whole.times.back(); t += gen.unif(0.5, 30.0)) {
      fn.starts.push_back(t);
      fn.values.push_back(0.8);
    }
    split.piecewise_covariates["z"] = fn;
    const double a = log_likelihood(p, whole, spec);
    EXPECT_NEAR(log_likelihood(p, split, spec), a, 1e-10 * std::abs(a));
  }
}

TEST(LogLikelihood, StepCovariateMatchesSegmentProduct) {
  // A covariate switching mid-interval changes Q there; the result must
  // agree with the oracle run on the two pieces as a product of kernels.
  ModelSpec spec = intercept_spec(2);
  spec.q_formula = {"z"};
  Parameters p = table_parameters();
  p.q[0][1].slopes = {1.0};
  p.q[1][0].slopes = {0.0};
  PatientRecord r;
  r.times = {0.0, 10.0};
  r.marks = {0.0, 30.0};
  r.piecewise_covariates["z"] = {{0.0, 4.0}, {0.0, 2.0}};

  oracle::Model m0 = oracle::from_parameters(table_parameters());
  oracle::Model m1 = m0;
  m1.q(0, 1) *= std::exp(2.0);
  const oracle::MpMatrix k = oracle::kernel(m0, 4.0) * oracle::kernel(m1, 6.0);
  oracle::mp total = 0;
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 2; ++j)
      total += oracle::mp(m0.delta[i]) * oracle::mark_density(m0, i, 0.0) * k(i, j) * oracle::mp(m0.lambda[j]) *
               oracle::mark_density(m0, j, 30.0);
  const double want = static_cast<double>(log(total));
  EXPECT_NEAR(log_likelihood(p, r, spec), want, 1e-12 * std::abs(want));
}

TEST(TotalLogLikelihood, SumsRecordsAndDoublesExactly) {
  oracle::InstanceGenerator gen(38);
  const ModelSpec spec = intercept_spec(2);
  const Parameters p = gen.parameters(spec);
  std::vector<PatientRecord> data;
  for (int i = 0; i < 25; ++i) data.push_back(gen.record(gen.pick(1, 80), "p" + std::to_string(i)));
  const double once = total_log_likelihood(p, data, spec);
  EXPECT_EQ(total_log_likelihood(p, std::span(data.data(), 1), spec), log_likelihood(p, data[0], spec));

  std::vector<PatientRecord> doubled = data;
  doubled.insert(doubled.end(), data.begin(), data.end());
  EXPECT_EQ(total_log_likelihood(p, doubled, spec), 2.0 * once);

  double sequential = 0.0;
  for (const auto& r : data) sequential += log_likelihood(p, r, spec);
  EXPECT_NEAR(once, sequential, 1e-10 * std::abs(once));
}

TEST(TotalLogLikelihood, ReproducibleAcrossRuns) {
  oracle::InstanceGenerator gen(39);
  const ModelSpec spec = intercept_spec(2);
  const Parameters p = table_parameters();
  std::vector<PatientRecord> data;
  for (int i = 0; i < 470; ++i) data.push_back(gen.record(gen.pick(50, 300), "p" + std::to_string(i)));
  const double a = total_log_likelihood(p, data, spec);
  std::vector<double> values;
  for (const auto& r : data) values.push_back(log_likelihood(p, r, spec));
  EXPECT_EQ(a, pairwise_sum(values));
  for (int k = 0; k < 3; ++k) EXPECT_EQ(total_log_likelihood(p, data, spec), a);
}

TEST(TotalLogLikelihood, ErrorsCarryRecordId) {
  const ModelSpec spec = intercept_spec(2);
  std::vector<PatientRecord> data(2);
  data[0].id = "ok";
  data[0].times = {0.0, 1.0};
  data[0].marks = {0.0, 0.0};
  data[1].id = "broken";
  data[1].times = {0.0, 1.0, 1.0};
  data[1].marks = {0.0, 0.0, 0.0};
  try {
    total_log_likelihood(table_parameters(), data, spec);
    FAIL();
  } catch (const RecordError& e) {
    EXPECT_EQ(e.record_id(), "broken");
  }
  EXPECT_THROW(total_log_likelihood(table_parameters(), std::span<const PatientRecord>{}, spec), DomainError);
}
