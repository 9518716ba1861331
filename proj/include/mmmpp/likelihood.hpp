#pragma once

// Log-likelihood of a marked, Markov-modulated Poisson record:
//
//   L = delta P(y_0) prod_tau [ exp((Q - Lambda) x_tau) Lambda P(y_tau) ] 1
//
// evaluated left to right with the forward vector renormalised to sum 1 at
// every event. Intervals crossing a covariate breakpoint are split into
// segments with constant Q and Lambda. Each segment propagator is computed as
// exp((Q - Lambda + c I) d) with c = min_i lambda_i and the factor exp(-c d)
// carried in log space, which keeps long gaps away from underflow.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <span>
#include <unordered_map>
#include <vector>

#include "mmmpp/error.hpp"
#include "mmmpp/linalg.hpp"
#include "mmmpp/model.hpp"
#include "mmmpp/parallel.hpp"

namespace mmmpp {

struct Segment {
  double duration = 0.0;
  Matrix q;       // generator in force on the segment
  Vector lambda;  // diagonal of Lambda
};

struct ForwardState {
  RowVector alpha;
  double log_scale = 0.0;
};

namespace detail {

inline std::vector<std::string> propagator_covariates(const ModelSpec& spec) {
  std::vector<std::string> names = spec.q_formula;
  for (const auto& n : spec.lambda_formula)
    if (std::find(names.begin(), names.end(), n) == names.end()) names.push_back(n);
  return names;
}

// Sorted breakpoints of every piecewise covariate that enters Q or Lambda.
inline std::vector<double> record_breakpoints(const PatientRecord& record, const ModelSpec& spec) {
  std::vector<double> out;
  for (const auto& name : propagator_covariates(spec)) {
    auto it = record.piecewise_covariates.find(name);
    if (it == record.piecewise_covariates.end()) continue;
    out.insert(out.end(), it->second.starts.begin(), it->second.starts.end());
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

// Splits (from, to] at the breakpoints strictly inside it. Returns the
// segment start times; durations follow from consecutive starts, with the
// last segment ending exactly at `to`.
inline std::vector<double> segment_starts(double from, double to, const std::vector<double>& breaks) {
  std::vector<double> starts{from};
  auto it = std::upper_bound(breaks.begin(), breaks.end(), from);
  for (; it != breaks.end() && *it < to; ++it) starts.push_back(*it);
  return starts;
}

inline Matrix shifted_generator(const Matrix& q, const Vector& lambda, double& shift) {
  shift = lambda.minCoeff();
  Matrix m = q;
  for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, i) -= lambda[i] - shift;
  return m;
}

}  // namespace detail

inline void validate_record_for_spec(const PatientRecord& record, const ModelSpec& spec) {
  record.validate();
  for (const auto& name : spec.covariate_names())
    if (!record.has_covariate(name))
      throw CovariateError(name, "record '" + record.id + "' lacks this covariate");
}

// Segments partitioning (t_{tau-1}, t_tau], tau in 1..n.
inline std::vector<Segment> build_segments(const PatientRecord& record, const Parameters& params,
                                           const ModelSpec& spec, std::size_t tau) {
  if (tau < 1 || tau >= record.times.size())
    throw DomainError("build_segments: interval index out of range");
  const double from = record.times[tau - 1];
  const double to = record.times[tau];
  const auto breaks = detail::record_breakpoints(record, spec);
  const auto starts = detail::segment_starts(from, to, breaks);
  std::vector<Segment> out;
  out.reserve(starts.size());
  double used = 0.0;
  for (std::size_t k = 0; k < starts.size(); ++k) {
    Segment s;
    if (k + 1 < starts.size()) {
      s.duration = starts[k + 1] - starts[k];
      used += s.duration;
    } else {
      s.duration = (to - from) - used;
    }
    const auto zq = record.covariates_at(spec.q_formula, starts[k]);
    const auto zl = record.covariates_at(spec.lambda_formula, starts[k]);
    s.q = intensity_matrix(params, zq);
    s.lambda = event_rates(params, zl);
    out.push_back(std::move(s));
  }
  return out;
}

// Everything the forward, backward and Viterbi passes need for one record.
// The true interval kernel is exp(log_shift[tau]) * propagator[tau].
struct RecordTerms {
  std::vector<Matrix> propagator;  // index tau - 1
  std::vector<double> log_shift;
  std::vector<Vector> event_lambda;  // Lambda at t_tau (left limit)
  Matrix mark_logdensity;            // (n+1) x N; row 0 is zero without an initial mark
  bool has_tail = false;
  Matrix tail_propagator;
  double tail_log_shift = 0.0;
};

namespace detail {

class PropagatorCache {
 public:
  PropagatorCache(const PatientRecord& record, const Parameters& params, const ModelSpec& spec)
      : record_(record), params_(params), spec_(spec) {}

  // Kernel over (from, to], with Lambda at `to` (left limit) returned.
  void interval(double from, double to, const std::vector<double>& breaks, Matrix& kernel,
                double& log_shift, Vector& lambda_end) {
    if (breaks.empty()) {
      // Covariates constant over the whole record.
      if (!constant_) constant_ = &config_at(from);
      const double d = to - from;
      kernel = propagate(*constant_, d);
      log_shift = -constant_->shift * d;
      lambda_end = constant_->lambda;
      return;
    }
    const auto starts = segment_starts(from, to, breaks);
    double used = 0.0;
    log_shift = 0.0;
    for (std::size_t k = 0; k < starts.size(); ++k) {
      double d;
      if (k + 1 < starts.size()) {
        d = starts[k + 1] - starts[k];
        used += d;
      } else {
        d = (to - from) - used;
      }
      const Config& cfg = config_at(starts[k]);
      const Matrix& p = propagate(cfg, d);
      log_shift -= cfg.shift * d;
      if (k == 0) {
        kernel = p;
      } else {
        kernel = kernel * p;
      }
      if (k + 1 == starts.size()) lambda_end = cfg.lambda;
    }
  }

 private:
  struct Config {
    Matrix generator;  // Q - Lambda + shift I
    Vector lambda;
    double shift;
  };

  const Config& config_at(double t) {
    std::vector<double> key = record_.covariates_at(spec_.q_formula, t);
    const auto zl = record_.covariates_at(spec_.lambda_formula, t);
    key.insert(key.end(), zl.begin(), zl.end());
    auto it = configs_.find(key);
    if (it != configs_.end()) return it->second;
    Config cfg;
    const Matrix q = intensity_matrix(params_, std::span<const double>(key.data(), spec_.q_formula.size()));
    cfg.lambda = event_rates(params_, zl);
    cfg.generator = shifted_generator(q, cfg.lambda, cfg.shift);
    return configs_.emplace(std::move(key), std::move(cfg)).first->second;
  }

  // The 2x2 closed form is cheaper than a hash lookup; larger models memoize
  // per (configuration, duration), since integer-day gaps recur constantly.
  const Matrix& propagate(const Config& cfg, double d) {
    scratch_ = cfg.generator * d;
    if (scratch_.rows() == 2 && detail::matexp_2x2(scratch_, result_)) return result_;
    if (scratch_.rows() <= 2) {
      result_ = matexp(scratch_);
      return result_;
    }
    const auto key = std::make_pair(&cfg, d);
    auto it = memo_.find(key);
    if (it != memo_.end()) return it->second;
    return memo_.emplace(key, matexp(scratch_)).first->second;
  }

  struct KeyHash {
    std::size_t operator()(const std::pair<const Config*, double>& k) const noexcept {
      return std::hash<double>{}(k.second) * 31u + std::hash<const Config*>{}(k.first);
    }
  };

  const PatientRecord& record_;
  const Parameters& params_;
  const ModelSpec& spec_;
  std::map<std::vector<double>, Config> configs_;
  const Config* constant_ = nullptr;
  Matrix scratch_, result_;
  std::unordered_map<std::pair<const Config*, double>, Matrix, KeyHash> memo_;
};

}  // namespace detail

// Natural mark parameters may vary by event through mark_formula; without
// one, each state's densities are evaluated in a single batch.
inline Matrix mark_logdensities(const PatientRecord& record, const Parameters& params,
                                const ModelSpec& spec) {
  const std::size_t n_events = record.times.size();
  const std::size_t n = spec.n_states;
  const MarkFamily& fam = spec.family();
  Matrix out = Matrix::Zero(static_cast<Eigen::Index>(n_events), static_cast<Eigen::Index>(n));
  const std::size_t first = record.has_initial_mark ? 0 : 1;
  if (first >= n_events) return out;
  std::span<const double> ys(record.marks.data() + first, n_events - first);
  std::vector<double> buf(ys.size());
  for (std::size_t i = 0; i < n; ++i) {
    if (spec.mark_formula.empty()) {
      fam.log_density(ys, params.marks[i].natural, buf);
    } else {
      for (std::size_t k = 0; k < ys.size(); ++k) {
        const auto zm = record.covariates_at(spec.mark_formula, record.times[first + k]);
        buf[k] = fam.log_density(ys[k], mark_params_at(params, spec, i, zm));
      }
    }
    for (std::size_t k = 0; k < ys.size(); ++k)
      out(static_cast<Eigen::Index>(first + k), static_cast<Eigen::Index>(i)) = buf[k];
  }
  return out;
}

inline RecordTerms record_terms(const Parameters& params, const PatientRecord& record,
                                const ModelSpec& spec) {
  RecordTerms terms;
  const std::size_t n_int = record.n_intervals();
  const auto breaks = detail::record_breakpoints(record, spec);
  detail::PropagatorCache cache(record, params, spec);
  terms.propagator.resize(n_int);
  terms.log_shift.resize(n_int);
  terms.event_lambda.resize(n_int);
  for (std::size_t tau = 1; tau <= n_int; ++tau)
    cache.interval(record.times[tau - 1], record.times[tau], breaks, terms.propagator[tau - 1],
                   terms.log_shift[tau - 1], terms.event_lambda[tau - 1]);
  terms.mark_logdensity = mark_logdensities(record, params, spec);
  if (spec.censoring == Censoring::kIntervalCensoredTail && record.followup_end &&
      *record.followup_end > record.times.back()) {
    terms.has_tail = true;
    Vector unused;
    cache.interval(record.times.back(), *record.followup_end, breaks, terms.tail_propagator,
                   terms.tail_log_shift, unused);
  }
  return terms;
}

namespace detail {

// alpha_i <- alpha_i * exp(logw_i), renormalised; returns the log of the
// pre-rescale sum. Zero total raises ImpossibleObservation.
inline double weigh_and_rescale(RowVector& alpha, const Vector& logw, std::size_t tau) {
  double m = -std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < alpha.size(); ++i)
    if (alpha[i] > 0.0) m = std::max(m, logw[i]);
  if (!std::isfinite(m)) throw ImpossibleObservation(tau);
  double s = 0.0;
  for (Eigen::Index i = 0; i < alpha.size(); ++i) {
    alpha[i] = alpha[i] > 0.0 ? alpha[i] * std::exp(logw[i] - m) : 0.0;
    s += alpha[i];
  }
  if (!(s > 0.0) || !std::isfinite(s)) throw ImpossibleObservation(tau);
  alpha /= s;
  return m + std::log(s);
}

inline ForwardState initial_forward(const Parameters& params, const Matrix& marks, bool has_initial_mark) {
  const auto n = static_cast<Eigen::Index>(params.n_states());
  ForwardState st;
  st.alpha = RowVector::Ones(n);
  Vector logw(n);
  for (Eigen::Index i = 0; i < n; ++i)
    logw[i] = std::log(params.delta[static_cast<std::size_t>(i)]) + (has_initial_mark ? marks(0, i) : 0.0);
  st.log_scale = weigh_and_rescale(st.alpha, logw, 0);
  return st;
}

inline void forward_event(ForwardState& st, const Matrix& kernel, double log_shift, const Vector& lambda,
                          const Vector& logf, std::size_t tau) {
  st.alpha = st.alpha * kernel;
  Vector logw = lambda.array().log().matrix() + logf;
  st.log_scale += log_shift + weigh_and_rescale(st.alpha, logw, tau);
}

}  // namespace detail

// One event of the forward recursion, from explicit segments.
inline ForwardState forward_step(const ForwardState& state, const std::vector<Segment>& segments,
                                 const Vector& lambda_at_event, const Vector& mark_logdensities,
                                 std::size_t tau = 0) {
  if (segments.empty()) throw DomainError("forward_step: no segments");
  const Eigen::Index n = state.alpha.size();
  Matrix kernel = Matrix::Identity(n, n);
  double log_shift = 0.0;
  for (const auto& s : segments) {
    double shift;
    const Matrix g = detail::shifted_generator(s.q, s.lambda, shift);
    kernel = kernel * matexp(g * s.duration);
    log_shift -= shift * s.duration;
  }
  ForwardState next = state;
  detail::forward_event(next, kernel, log_shift, lambda_at_event, mark_logdensities, tau);
  return next;
}

inline double log_likelihood(const Parameters& params, const RecordTerms& terms, const PatientRecord& record) {
  ForwardState st = detail::initial_forward(params, terms.mark_logdensity, record.has_initial_mark);
  for (std::size_t tau = 1; tau <= terms.propagator.size(); ++tau) {
    const Vector logf = terms.mark_logdensity.row(static_cast<Eigen::Index>(tau)).transpose();
    detail::forward_event(st, terms.propagator[tau - 1], terms.log_shift[tau - 1],
                          terms.event_lambda[tau - 1], logf, tau);
  }
  if (terms.has_tail) {
    const double mass = (st.alpha * terms.tail_propagator).sum();
    if (!(mass > 0.0)) throw ImpossibleObservation(terms.propagator.size() + 1);
    st.log_scale += terms.tail_log_shift + std::log(mass);
  }
  return st.log_scale;
}

namespace detail {

// Same recursion as log_likelihood(params, terms, record) without storing
// the per-interval terms.
inline double streaming_log_likelihood(const Parameters& params, const PatientRecord& record,
                                       const ModelSpec& spec) {
  const auto n = static_cast<Eigen::Index>(spec.n_states);
  const auto breaks = record_breakpoints(record, spec);
  PropagatorCache cache(record, params, spec);
  const Matrix marks = mark_logdensities(record, params, spec);
  ForwardState st = initial_forward(params, marks, record.has_initial_mark);
  Matrix kernel(n, n);
  Vector lambda(n), logw(n), last_lambda(n), log_lambda(n);
  RowVector next(n);
  double log_shift = 0.0;
  const std::size_t n_int = record.n_intervals();
  for (std::size_t tau = 1; tau <= n_int; ++tau) {
    cache.interval(record.times[tau - 1], record.times[tau], breaks, kernel, log_shift, lambda);
    next.noalias() = st.alpha * kernel;
    st.alpha.swap(next);
    if (tau == 1 || lambda != last_lambda) {
      last_lambda = lambda;
      log_lambda = lambda.array().log().matrix();
    }
    for (Eigen::Index i = 0; i < n; ++i) logw[i] = log_lambda[i] + marks(static_cast<Eigen::Index>(tau), i);
    st.log_scale += log_shift + weigh_and_rescale(st.alpha, logw, tau);
  }
  if (spec.censoring == Censoring::kIntervalCensoredTail && record.followup_end &&
      *record.followup_end > record.times.back()) {
    cache.interval(record.times.back(), *record.followup_end, breaks, kernel, log_shift, lambda);
    const double mass = (st.alpha * kernel).sum();
    if (!(mass > 0.0)) throw ImpossibleObservation(n_int + 1);
    st.log_scale += log_shift + std::log(mass);
  }
  return st.log_scale;
}

}  // namespace detail

inline double log_likelihood(const Parameters& params, const PatientRecord& record, const ModelSpec& spec) {
  validate_record_for_spec(record, spec);
  try {
    return detail::streaming_log_likelihood(params, record, spec);
  } catch (const ImpossibleObservation& e) {
    throw ImpossibleObservation(e.tau(), record.id);
  }
}

// Per-record values, evaluated concurrently; errors carry the record id.
inline std::vector<double> record_log_likelihoods(const Parameters& params,
                                                  std::span<const PatientRecord> dataset,
                                                  const ModelSpec& spec) {
  std::vector<double> values(dataset.size());
  parallel_for(dataset.size(), [&](std::size_t r) {
    try {
      values[r] = log_likelihood(params, dataset[r], spec);
    } catch (const RecordError&) {
      throw;
    } catch (const Error& e) {
      throw RecordError(dataset[r].id, e);
    }
  });
  return values;
}

inline double total_log_likelihood(const Parameters& params, std::span<const PatientRecord> dataset,
                                   const ModelSpec& spec) {
  if (dataset.empty()) throw DomainError("total_log_likelihood: empty dataset");
  params.validate(spec);
  const auto values = record_log_likelihoods(params, dataset, spec);
  return pairwise_sum(values);
}

}  // namespace mmmpp
