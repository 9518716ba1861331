#pragma once

// State decoding at event times: global Viterbi path and forward-backward
// posteriors. States are 0-based in the API; files print them 1-based.

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "mmmpp/likelihood.hpp"

namespace mmmpp {

struct DecodedPath {
  std::string record_id;
  std::vector<std::size_t> states;  // one per event time
  double log_joint = 0.0;
};

inline DecodedPath viterbi(const Parameters& params, const PatientRecord& record, const ModelSpec& spec) {
  validate_record_for_spec(record, spec);
  params.validate(spec);
  const RecordTerms terms = record_terms(params, record, spec);
  const auto n = static_cast<Eigen::Index>(spec.n_states);
  const std::size_t n_events = record.times.size();
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();

  std::vector<std::vector<std::size_t>> back(n_events, std::vector<std::size_t>(static_cast<std::size_t>(n)));
  Vector score(n);
  for (Eigen::Index i = 0; i < n; ++i)
    score[i] = std::log(params.delta[static_cast<std::size_t>(i)]) +
               (record.has_initial_mark ? terms.mark_logdensity(0, i) : 0.0);
  if (!std::isfinite(score.maxCoeff())) throw ImpossibleObservation(0, record.id);

  Vector next(n);
  for (std::size_t tau = 1; tau < n_events; ++tau) {
    const Matrix logp = terms.propagator[tau - 1].array().log().matrix();
    for (Eigen::Index j = 0; j < n; ++j) {
      double best = kNegInf;
      std::size_t arg = 0;
      for (Eigen::Index i = 0; i < n; ++i) {
        const double cand = score[i] + logp(i, j);
        if (cand > best) {
          best = cand;
          arg = static_cast<std::size_t>(i);
        }
      }
      back[tau][static_cast<std::size_t>(j)] = arg;
      next[j] = best + terms.log_shift[tau - 1] + std::log(terms.event_lambda[tau - 1][j]) +
                terms.mark_logdensity(static_cast<Eigen::Index>(tau), j);
    }
    score = next;
    if (!std::isfinite(score.maxCoeff())) throw ImpossibleObservation(tau, record.id);
  }
  if (terms.has_tail) {
    for (Eigen::Index j = 0; j < n; ++j)
      score[j] += terms.tail_log_shift + std::log(terms.tail_propagator.row(j).sum());
  }

  DecodedPath out;
  out.record_id = record.id;
  out.states.resize(n_events);
  double best = kNegInf;
  std::size_t arg = 0;
  for (Eigen::Index j = 0; j < n; ++j)
    if (score[j] > best) {
      best = score[j];
      arg = static_cast<std::size_t>(j);
    }
  out.log_joint = best;
  out.states[n_events - 1] = arg;
  for (std::size_t tau = n_events - 1; tau > 0; --tau) out.states[tau - 1] = back[tau][out.states[tau]];
  return out;
}

// Row tau holds Pr(S_tau = i | all events and marks of the record).
inline Matrix state_probabilities(const Parameters& params, const PatientRecord& record,
                                  const ModelSpec& spec) {
  validate_record_for_spec(record, spec);
  params.validate(spec);
  const RecordTerms terms = record_terms(params, record, spec);
  const auto n = static_cast<Eigen::Index>(spec.n_states);
  const std::size_t n_events = record.times.size();

  std::vector<RowVector> alpha(n_events);
  std::vector<Vector> logw(n_events, Vector(n));
  try {
    ForwardState st = detail::initial_forward(params, terms.mark_logdensity, record.has_initial_mark);
    alpha[0] = st.alpha;
    for (std::size_t tau = 1; tau < n_events; ++tau) {
      const Vector logf = terms.mark_logdensity.row(static_cast<Eigen::Index>(tau)).transpose();
      logw[tau] = terms.event_lambda[tau - 1].array().log().matrix() + logf;
      detail::forward_event(st, terms.propagator[tau - 1], terms.log_shift[tau - 1],
                            terms.event_lambda[tau - 1], logf, tau);
      alpha[tau] = st.alpha;
    }
  } catch (const ImpossibleObservation& e) {
    throw ImpossibleObservation(e.tau(), record.id);
  }

  // beta_tau(i) proportional to Pr(observations after tau | S_tau = i).
  Vector beta = terms.has_tail ? Vector(terms.tail_propagator.rowwise().sum()) : Vector::Ones(n);
  beta /= beta.maxCoeff();
  Matrix post(static_cast<Eigen::Index>(n_events), n);
  for (std::size_t tau = n_events; tau-- > 0;) {
    RowVector row = alpha[tau].cwiseProduct(beta.transpose());
    post.row(static_cast<Eigen::Index>(tau)) = row / row.sum();
    if (tau == 0) break;
    const double m = logw[tau].maxCoeff();
    Vector weighted(n);
    for (Eigen::Index i = 0; i < n; ++i) weighted[i] = std::exp(logw[tau][i] - m) * beta[i];
    beta = terms.propagator[tau - 1] * weighted;
    const double scale = beta.maxCoeff();
    if (!(scale > 0.0)) throw ImpossibleObservation(tau, record.id);
    beta /= scale;
  }
  return post;
}

}  // namespace mmmpp
