#pragma once

// Exact generative sampling: latent path, event times and marks.

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "mmmpp/error.hpp"
#include "mmmpp/likelihood.hpp"
#include "mmmpp/model.hpp"
#include "mmmpp/random.hpp"
#include "mmmpp/stats.hpp"

namespace mmmpp {

// State states[k] is occupied on [jump_times[k], jump_times[k+1]), the last
// one until t_max.
struct StatePath {
  std::vector<double> jump_times;
  std::vector<std::size_t> states;
  double t_max = 0.0;

  std::size_t state_at(double t) const {
    auto it = std::upper_bound(jump_times.begin(), jump_times.end(), t);
    return states[static_cast<std::size_t>(it - jump_times.begin()) - 1];
  }
  double segment_end(std::size_t k) const { return k + 1 < jump_times.size() ? jump_times[k + 1] : t_max; }
};

inline StatePath simulate_ctmc(const Matrix& q, std::span<const double> delta, double t_max, RandomStream& rng) {
  if (!(t_max > 0.0)) throw DomainError("simulate_ctmc: t_max must be positive");
  const auto n = q.rows();
  if (q.cols() != n || static_cast<Eigen::Index>(delta.size()) != n)
    throw DomainError("simulate_ctmc: dimension mismatch");
  StatePath path;
  path.t_max = t_max;
  std::size_t state = rng.categorical(delta);
  double t = 0.0;
  path.jump_times.push_back(0.0);
  path.states.push_back(state);
  std::vector<double> weights(static_cast<std::size_t>(n));
  for (;;) {
    const double exit_rate = -q(static_cast<Eigen::Index>(state), static_cast<Eigen::Index>(state));
    if (!(exit_rate > 0.0)) break;  // absorbing
    t += rng.exponential(exit_rate);
    if (t >= t_max) break;
    for (Eigen::Index j = 0; j < n; ++j)
      weights[static_cast<std::size_t>(j)] =
          j == static_cast<Eigen::Index>(state) ? 0.0 : q(static_cast<Eigen::Index>(state), j);
    state = rng.categorical(weights);
    path.jump_times.push_back(t);
    path.states.push_back(state);
  }
  return path;
}

// Event times in (0, t_max]: a Poisson process whose rate is lambda[state]
// on each constant-state segment.
inline std::vector<double> simulate_events(const StatePath& path, std::span<const double> lambda,
                                           RandomStream& rng) {
  std::vector<double> times;
  for (std::size_t k = 0; k < path.states.size(); ++k) {
    const double rate = lambda[path.states[k]];
    if (!(rate > 0.0)) continue;
    const double end = path.segment_end(k);
    double t = path.jump_times[k];
    for (;;) {
      t += rng.exponential(rate);
      if (t >= end) break;
      times.push_back(t);
    }
  }
  return times;
}

struct SimulatedPatient {
  PatientRecord record;
  StatePath path;
  std::vector<std::size_t> event_states;  // state at each event time
};

// Only static covariates are supported here: Q, Lambda and the mark
// parameters are fixed over the simulated follow-up.
inline SimulatedPatient simulate_patient_with_truth(const Parameters& params, const ModelSpec& spec,
                                                    const CovariateMap& covariates, double t_max,
                                                    RandomStream& rng, std::string id = "sim") {
  params.validate(spec);
  const Matrix q = intensity_matrix(params, spec, covariates);
  const Vector lam = event_rates(params, spec, covariates);
  const auto zm = covariate_vector(spec.mark_formula, covariates);
  const MarkFamily& fam = spec.family();
  std::vector<std::vector<double>> mark_params(spec.n_states);
  for (std::size_t i = 0; i < spec.n_states; ++i) mark_params[i] = mark_params_at(params, spec, i, zm);

  SimulatedPatient out;
  out.path = simulate_ctmc(q, params.delta, t_max, rng);
  const std::vector<double> lam_v(lam.data(), lam.data() + lam.size());
  const auto later = simulate_events(out.path, lam_v, rng);

  PatientRecord& rec = out.record;
  rec.id = std::move(id);
  rec.times.reserve(later.size() + 1);
  rec.times.push_back(0.0);
  rec.times.insert(rec.times.end(), later.begin(), later.end());
  rec.marks.reserve(rec.times.size());
  out.event_states.reserve(rec.times.size());
  for (double t : rec.times) {
    const std::size_t s = out.path.state_at(t);
    out.event_states.push_back(s);
    rec.marks.push_back(fam.sample(mark_params[s], rng));
  }
  rec.static_covariates = covariates;
  rec.followup_end = t_max;
  return out;
}

inline PatientRecord simulate_patient(const Parameters& params, const ModelSpec& spec,
                                      const CovariateMap& covariates, double t_max, RandomStream& rng) {
  return simulate_patient_with_truth(params, spec, covariates, t_max, rng).record;
}

// Patient i uses sub-stream i of `seed`; covariate rows are drawn uniformly
// from `covariate_rows` (or left empty when none are given).
inline std::vector<SimulatedPatient> simulate_cohort(const Parameters& params, const ModelSpec& spec,
                                                     std::span<const CovariateMap> covariate_rows,
                                                     std::size_t n_patients, double t_max,
                                                     std::uint64_t seed) {
  std::vector<SimulatedPatient> out(n_patients);
  const RandomStream root(seed);
  const CovariateMap empty;
  parallel_for(n_patients, [&](std::size_t i) {
    RandomStream rng = root.substream(i);
    const CovariateMap* cov = &empty;
    if (!covariate_rows.empty()) {
      const auto pick = static_cast<std::size_t>(rng.uniform() * static_cast<double>(covariate_rows.size()));
      cov = &covariate_rows[std::min(pick, covariate_rows.size() - 1)];
    }
    out[i] = simulate_patient_with_truth(params, spec, *cov, t_max, rng, "sim" + std::to_string(i + 1));
  });
  return out;
}

struct CheckRow {
  std::string variable;   // waiting_time | mark
  std::string statistic;  // q01 .. q99, max, zero_fraction
  double observed = 0.0;
  double simulated_mean = 0.0;
  double envelope_lower = 0.0;  // central 95% of simulated statistics
  double envelope_upper = 0.0;
  bool inside = false;
};

struct HistogramBin {
  std::string variable;
  double lower = 0.0;
  double upper = 0.0;  // +inf for the overflow bin
  double observed = 0.0;
  double simulated_mean = 0.0;
};

struct CheckReport {
  std::size_t n_sim = 0;
  std::vector<CheckRow> rows;
  std::vector<HistogramBin> histogram;
};

namespace detail {

struct CohortSummary {
  std::vector<double> waits;
  std::vector<double> positive_marks;
  double zero_fraction = 0.0;
};

inline CohortSummary summarize(std::span<const PatientRecord> records) {
  CohortSummary s;
  std::size_t n_marks = 0;
  std::size_t zeros = 0;
  for (const auto& r : records) {
    for (std::size_t k = 1; k < r.times.size(); ++k) s.waits.push_back(r.times[k] - r.times[k - 1]);
    for (std::size_t k = r.has_initial_mark ? 0 : 1; k < r.marks.size(); ++k) {
      ++n_marks;
      if (r.marks[k] == 0.0) {
        ++zeros;
      } else {
        s.positive_marks.push_back(r.marks[k]);
      }
    }
  }
  std::sort(s.waits.begin(), s.waits.end());
  std::sort(s.positive_marks.begin(), s.positive_marks.end());
  s.zero_fraction = n_marks ? static_cast<double>(zeros) / static_cast<double>(n_marks) : 0.0;
  return s;
}

inline constexpr std::pair<const char*, double> kCheckQuantiles[] = {
    {"q01", 0.01}, {"q05", 0.05}, {"q25", 0.25}, {"q50", 0.50}, {"q75", 0.75}, {"q95", 0.95}, {"q99", 0.99}};

inline std::vector<double> statistics(const std::vector<double>& sorted) {
  std::vector<double> out;
  for (const auto& [name, p] : kCheckQuantiles) out.push_back(sorted.empty() ? 0.0 : quantile_sorted(sorted, p));
  out.push_back(sorted.empty() ? 0.0 : sorted.back());
  return out;
}

inline std::vector<double> bin_counts(const std::vector<double>& values, const std::vector<double>& edges) {
  std::vector<double> counts(edges.size(), 0.0);  // last bin: [edges.back(), inf)
  for (double v : values) {
    auto it = std::upper_bound(edges.begin(), edges.end(), v);
    counts[static_cast<std::size_t>(it - edges.begin()) - 1] += 1.0;
  }
  return counts;
}

}  // namespace detail

// Simulates n_sim cohorts matched to the observed records (same follow-up
// length and static covariates) and compares quantiles, maxima, zero-mark
// fraction and histograms of waiting times and positive marks.
inline CheckReport model_check(const Parameters& params, const ModelSpec& spec,
                               std::span<const PatientRecord> dataset, std::size_t n_sim,
                               std::uint64_t seed, std::size_t n_bins = 30) {
  if (n_sim < 1) throw DomainError("n_sim must be >= 1");
  if (dataset.empty()) throw DomainError("model_check: empty dataset");
  if (n_bins < 1) throw DomainError("model_check: n_bins must be >= 1");
  const auto observed = detail::summarize(dataset);

  std::vector<std::vector<double>> wait_stats(n_sim);
  std::vector<std::vector<double>> mark_stats(n_sim);
  std::vector<double> zero_fracs(n_sim);
  std::vector<std::vector<double>> wait_hist(n_sim);
  std::vector<std::vector<double>> mark_hist(n_sim);

  auto edges_for = [n_bins](const std::vector<double>& sorted) {
    const double top = sorted.empty() ? 1.0 : sorted.back();
    std::vector<double> e(n_bins);
    for (std::size_t b = 0; b < n_bins; ++b) e[b] = top * static_cast<double>(b) / static_cast<double>(n_bins);
    return e;
  };
  const auto wait_edges = edges_for(observed.waits);
  const auto mark_edges = edges_for(observed.positive_marks);

  const RandomStream root(seed);
  for (std::size_t c = 0; c < n_sim; ++c) {
    const RandomStream cohort_stream = root.substream(c);
    std::vector<PatientRecord> cohort(dataset.size());
    parallel_for(dataset.size(), [&](std::size_t i) {
      RandomStream rng = cohort_stream.substream(i);
      const auto& obs = dataset[i];
      const double t_end = obs.followup_end.value_or(obs.times.back());
      cohort[i] = simulate_patient(params, spec, obs.static_covariates, t_end > 0.0 ? t_end : 1.0, rng);
    });
    const auto sim = detail::summarize(cohort);
    wait_stats[c] = detail::statistics(sim.waits);
    mark_stats[c] = detail::statistics(sim.positive_marks);
    zero_fracs[c] = sim.zero_fraction;
    wait_hist[c] = detail::bin_counts(sim.waits, wait_edges);
    mark_hist[c] = detail::bin_counts(sim.positive_marks, mark_edges);
  }

  CheckReport report;
  report.n_sim = n_sim;
  auto add_row = [&](const std::string& var, const std::string& stat, double obs, std::vector<double> sims) {
    CheckRow row;
    row.variable = var;
    row.statistic = stat;
    row.observed = obs;
    row.simulated_mean = mean(sims);
    std::sort(sims.begin(), sims.end());
    row.envelope_lower = quantile_sorted(sims, 0.025);
    row.envelope_upper = quantile_sorted(sims, 0.975);
    row.inside = obs >= row.envelope_lower && obs <= row.envelope_upper;
    report.rows.push_back(row);
  };
  const auto obs_wait = detail::statistics(observed.waits);
  const auto obs_mark = detail::statistics(observed.positive_marks);
  std::vector<std::string> names;
  for (const auto& [name, p] : detail::kCheckQuantiles) names.emplace_back(name);
  names.emplace_back("max");
  for (std::size_t k = 0; k < names.size(); ++k) {
    std::vector<double> w(n_sim), m(n_sim);
    for (std::size_t c = 0; c < n_sim; ++c) {
      w[c] = wait_stats[c][k];
      m[c] = mark_stats[c][k];
    }
    add_row("waiting_time", names[k], obs_wait[k], w);
    add_row("mark", names[k], obs_mark[k], m);
  }
  add_row("mark", "zero_fraction", observed.zero_fraction, zero_fracs);

  auto add_hist = [&](const std::string& var, const std::vector<double>& edges, const std::vector<double>& values,
                      const std::vector<std::vector<double>>& sims) {
    const auto obs_counts = detail::bin_counts(values, edges);
    for (std::size_t b = 0; b < edges.size(); ++b) {
      HistogramBin bin;
      bin.variable = var;
      bin.lower = edges[b];
      bin.upper = b + 1 < edges.size() ? edges[b + 1] : std::numeric_limits<double>::infinity();
      bin.observed = obs_counts[b];
      double s = 0.0;
      for (const auto& h : sims) s += h[b];
      bin.simulated_mean = s / static_cast<double>(sims.size());
      report.histogram.push_back(bin);
    }
  };
  add_hist("waiting_time", wait_edges, observed.waits, wait_hist);
  add_hist("mark", mark_edges, observed.positive_marks, mark_hist);
  return report;
}

}  // namespace mmmpp
