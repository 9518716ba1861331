#pragma once

// Maximum likelihood on the working scale, observed information, Wald
// intervals and Monte Carlo propagation to derived quantities.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mmmpp/error.hpp"
#include "mmmpp/likelihood.hpp"
#include "mmmpp/model.hpp"
#include "mmmpp/optimize.hpp"
#include "mmmpp/random.hpp"
#include "mmmpp/stats.hpp"

namespace mmmpp {

struct FitSettings {
  std::size_t n_starts = 5;
  std::uint64_t seed = 1;
  std::size_t max_iters = 500;
  // Applies to the gradient of the mean per-event log-likelihood.
  double gradient_tolerance = 1e-6;
  double jitter_sd = 0.3;
  std::optional<Parameters> init_overrides;  // replaces the data-driven start 0
  bool compute_information = true;
};

struct StartSummary {
  std::size_t index = 0;
  double initial_loglik = 0.0;
  double final_loglik = 0.0;
  bool converged = false;
  std::size_t iterations = 0;
  std::string message;
};

struct FitResult {
  ModelSpec spec;
  Parameters estimates;
  Vector working_estimates;
  double loglik = 0.0;
  bool converged = false;
  std::string message;
  std::size_t n_iterations = 0;
  std::size_t start_index = 0;
  std::vector<StartSummary> starts;
  std::size_t n_events = 0;  // total observation count (with index events)

  // Second-order quantities on the working scale; empty when not computed.
  Matrix hessian;      // of the total log-likelihood
  Matrix information;  // -hessian
  Matrix covariance;   // inverse information (eigenvalue-clipped if needed)
  Vector standard_errors;
  bool information_positive_definite = false;
  std::vector<std::string> warnings;

  std::size_t n_params() const { return static_cast<std::size_t>(working_estimates.size()); }
  double aic() const { return -2.0 * loglik + 2.0 * static_cast<double>(n_params()); }
  double bic() const {
    return -2.0 * loglik + static_cast<double>(n_params()) * std::log(static_cast<double>(n_events));
  }
  bool has_covariance() const { return covariance.size() > 0; }
};

inline std::size_t count_events(std::span<const PatientRecord> dataset) {
  std::size_t n = 0;
  for (const auto& r : dataset) n += r.times.size();
  return n;
}

// A FitResult wrapping fixed parameters, without uncertainty.
inline FitResult fixed_parameters_result(const Parameters& params, const ModelSpec& spec) {
  FitResult fit;
  fit.spec = spec;
  fit.estimates = params;
  fit.working_estimates = to_working(params, spec);
  fit.converged = false;
  fit.message = "fixed parameters";
  return fit;
}

// Data-driven starting values: see the README for the scheme.
inline Parameters initial_parameters(std::span<const PatientRecord> dataset, const ModelSpec& spec) {
  const std::size_t n = spec.n_states;
  Parameters p = default_parameters(spec);
  std::vector<double> follow_up;
  std::size_t gaps = 0;
  std::vector<double> zeros_marks;
  std::vector<double> positive;
  for (const auto& r : dataset) {
    follow_up.push_back(r.times.back());
    gaps += r.n_intervals();
    for (std::size_t k = r.has_initial_mark ? 0 : 1; k < r.marks.size(); ++k)
      (r.marks[k] == 0.0 ? zeros_marks : positive).push_back(r.marks[k]);
  }
  const double total_time = pairwise_sum(follow_up);
  const double rate = gaps > 0 && total_time > 0.0 ? static_cast<double>(gaps) / total_time : 1.0;
  const double mean_gap = 1.0 / rate;
  for (std::size_t i = 0; i < n; ++i) {
    const double factor = n == 1 ? 1.0 : std::pow(2.0, 1.0 - 2.0 * static_cast<double>(i) / static_cast<double>(n - 1));
    p.lambda[i].base = rate * factor;
    for (std::size_t j = 0; j < n; ++j)
      if (i != j) p.q[i][j].base = 1.0 / (mean_gap * 10.0);
  }
  // Mark strata: distinct positive values go to the stratum of their
  // mid-rank, weighted by multiplicity; the zeros enter every stratum with
  // weight 1/n. Both rules are unchanged by duplicating the data.
  std::sort(positive.begin(), positive.end());
  const MarkFamily& fam = spec.family();
  std::vector<std::vector<double>> values(n), weights(n);
  const double n_pos = static_cast<double>(positive.size());
  for (std::size_t lo = 0; lo < positive.size();) {
    std::size_t hi = lo;
    while (hi < positive.size() && positive[hi] == positive[lo]) ++hi;
    const double mid = 0.5 * static_cast<double>(lo + hi) / n_pos;
    const auto s = std::min(n - 1, static_cast<std::size_t>(mid * static_cast<double>(n)));
    values[s].push_back(positive[lo]);
    weights[s].push_back(static_cast<double>(hi - lo));
    lo = hi;
  }
  const double zero_weight = static_cast<double>(zeros_marks.size()) / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (zero_weight > 0.0) {
      values[i].push_back(0.0);
      weights[i].push_back(zero_weight);
    }
    p.marks[i].natural = fam.initial_params(values[i], weights[i]);
  }
  return p;
}

namespace detail {

// Objective for the minimiser: negative mean log-likelihood per observation.
struct ScaledObjective {
  std::span<const PatientRecord> dataset;
  const ModelSpec* spec;
  double n_events;

  double operator()(const Vector& w) const {
    const Parameters p = to_natural(w, *spec);
    const double ll = total_log_likelihood(p, dataset, *spec);
    return -ll / n_events;
  }
};

// Permutation sorting states by descending base event rate (stable).
inline std::vector<std::size_t> canonical_order(const Parameters& p) {
  std::vector<std::size_t> perm(p.n_states());
  std::iota(perm.begin(), perm.end(), 0);
  std::stable_sort(perm.begin(), perm.end(),
                   [&](std::size_t a, std::size_t b) { return p.lambda[a].base > p.lambda[b].base; });
  return perm;
}

}  // namespace detail

// Negative Hessian of the total log-likelihood at `working`, by central
// differences with h_k = max(1e-4, 1e-4 |x_k|), symmetrised.
inline Matrix observed_information(const std::function<double(const Vector&)>& loglik, const Vector& working,
                                   Matrix* hessian_out = nullptr) {
  const Eigen::Index k = working.size();
  Vector h(k);
  for (Eigen::Index i = 0; i < k; ++i) h[i] = std::max(1e-4, 1e-4 * std::abs(working[i]));
  const double f0 = loglik(working);
  Matrix hess(k, k);
  Vector x = working;
  Vector f_plus(k), f_minus(k);
  for (Eigen::Index i = 0; i < k; ++i) {
    x[i] = working[i] + h[i];
    f_plus[i] = loglik(x);
    x[i] = working[i] - h[i];
    f_minus[i] = loglik(x);
    x[i] = working[i];
    hess(i, i) = (f_plus[i] - 2.0 * f0 + f_minus[i]) / (h[i] * h[i]);
  }
  for (Eigen::Index i = 0; i < k; ++i)
    for (Eigen::Index j = i + 1; j < k; ++j) {
      auto eval = [&](double si, double sj) {
        x[i] = working[i] + si * h[i];
        x[j] = working[j] + sj * h[j];
        const double v = loglik(x);
        x[i] = working[i];
        x[j] = working[j];
        return v;
      };
      const double v = (eval(1, 1) - eval(1, -1) - eval(-1, 1) + eval(-1, -1)) / (4.0 * h[i] * h[j]);
      hess(i, j) = v;
      hess(j, i) = v;
    }
  const Matrix sym = 0.5 * (hess + hess.transpose());
  if (hessian_out) *hessian_out = sym;
  return -sym;
}

// Eigenvalue-clipped inverse; `clipped` reports whether clipping was needed.
inline Matrix clipped_inverse(const Matrix& info, bool& positive_definite, double floor = 1e-10) {
  Eigen::SelfAdjointEigenSolver<Matrix> eig(info);
  Vector ev = eig.eigenvalues();
  positive_definite = ev.minCoeff() > 0.0;
  for (Eigen::Index i = 0; i < ev.size(); ++i) ev[i] = std::max(ev[i], floor);
  return eig.eigenvectors() * ev.cwiseInverse().asDiagonal() * eig.eigenvectors().transpose();
}

inline void attach_information(FitResult& fit, std::span<const PatientRecord> dataset) {
  const ModelSpec spec = fit.spec;
  auto ll = [&](const Vector& w) { return total_log_likelihood(to_natural(w, spec), dataset, spec); };
  fit.information = observed_information(ll, fit.working_estimates, &fit.hessian);
  bool pd = false;
  fit.covariance = clipped_inverse(fit.information, pd);
  Eigen::LLT<Matrix> llt(fit.information);
  fit.information_positive_definite = pd && llt.info() == Eigen::Success;
  if (fit.information_positive_definite) fit.covariance = llt.solve(Matrix::Identity(fit.information.rows(), fit.information.cols()));
  if (!fit.information_positive_definite)
    fit.warnings.push_back(
        "observed information is not positive definite (boundary estimate or weak identifiability); "
        "intervals are unreliable");
  fit.standard_errors = fit.covariance.diagonal().cwiseMax(0.0).cwiseSqrt();
}

inline Matrix observed_information(const FitResult& fit, std::span<const PatientRecord> dataset) {
  const ModelSpec spec = fit.spec;
  auto ll = [&](const Vector& w) { return total_log_likelihood(to_natural(w, spec), dataset, spec); };
  return observed_information(ll, fit.working_estimates);
}

inline FitResult fit(std::span<const PatientRecord> dataset, const ModelSpec& spec, const FitSettings& settings) {
  spec.validate();
  if (dataset.empty()) throw EstimationError("fit: empty dataset");
  if (settings.n_starts < 1) throw ValidationError("n_starts", "must be >= 1");
  if (!(settings.gradient_tolerance > 0.0)) throw ValidationError("gradient_tolerance", "must be positive");
  for (const auto& r : dataset) {
    try {
      validate_record_for_spec(r, spec);
    } catch (const Error& e) {
      throw RecordError(r.id, e);
    }
  }
  const std::size_t n_events = count_events(dataset);
  detail::ScaledObjective objective{dataset, &spec, static_cast<double>(n_events)};

  const Parameters base = settings.init_overrides ? *settings.init_overrides : initial_parameters(dataset, spec);
  const Vector x0 = to_working(base, spec);
  RandomStream jitter(settings.seed, 0x6a17);

  LbfgsSettings opt;
  opt.max_iters = settings.max_iters;
  opt.gradient_tolerance = settings.gradient_tolerance;

  FitResult best;
  bool have_best = false;
  std::vector<StartSummary> starts;
  std::ostringstream failures;
  for (std::size_t s = 0; s < settings.n_starts; ++s) {
    Vector x = x0;
    if (s > 0)
      for (Eigen::Index k = 0; k < x.size(); ++k) x[k] += settings.jitter_sd * jitter.normal();
    StartSummary summary;
    summary.index = s;
    const double f0 = safe_eval(objective, x);
    if (!std::isfinite(f0)) {
      summary.message = "discarded: log-likelihood not finite at initialization";
      failures << "start " << s << ": " << summary.message << "; ";
      starts.push_back(summary);
      continue;
    }
    summary.initial_loglik = -f0 * static_cast<double>(n_events);
    const LbfgsResult r = lbfgs_minimize(objective, x, opt);
    summary.converged = r.converged;
    summary.iterations = r.iterations;
    summary.message = r.message;
    if (!std::isfinite(r.value)) {
      failures << "start " << s << ": " << r.message << "; ";
      starts.push_back(summary);
      continue;
    }
    const Parameters est = to_natural(r.x, spec);
    summary.final_loglik = total_log_likelihood(est, dataset, spec);
    starts.push_back(summary);
    if (!have_best || summary.final_loglik > best.loglik) {
      have_best = true;
      best.estimates = est;
      best.working_estimates = r.x;
      best.loglik = summary.final_loglik;
      best.converged = r.converged;
      best.message = r.message;
      best.n_iterations = r.iterations;
      best.start_index = s;
    }
  }
  if (!have_best) throw EstimationError("all starts failed: " + failures.str());

  best.spec = spec;
  best.starts = std::move(starts);
  best.n_events = n_events;
  const auto perm = detail::canonical_order(best.estimates);
  best.estimates = permute_states(best.estimates, perm);
  best.working_estimates = to_working(best.estimates, spec);
  best.loglik = total_log_likelihood(best.estimates, dataset, spec);
  if (!best.converged) best.warnings.push_back("optimizer did not converge: " + best.message);
  if (settings.compute_information) attach_information(best, dataset);
  return best;
}

struct NaturalInterval {
  std::string name;
  double estimate = 0.0;
  double lower = 0.0;
  double upper = 0.0;
  bool reliable = true;
};

// The natural-scale parameter list used in reports, in layout order.
inline std::vector<std::string> natural_labels(const ModelSpec& spec) {
  std::vector<std::string> out;
  const std::size_t n = spec.n_states;
  auto s = [](std::size_t i) { return std::to_string(i + 1); };
  for (std::size_t i = 0; i < n; ++i) out.push_back("delta[" + s(i) + "]");
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      out.push_back("q[" + s(i) + "," + s(j) + "]");
      for (const auto& c : spec.q_formula) out.push_back("q[" + s(i) + "," + s(j) + "]." + c);
    }
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back("lambda[" + s(i) + "]");
    for (const auto& c : spec.lambda_formula) out.push_back("lambda[" + s(i) + "]." + c);
  }
  const auto names = spec.family().param_names();
  for (std::size_t i = 0; i < n; ++i) {
    for (const auto& nm : names) out.push_back(nm + "[" + s(i) + "]");
    for (const auto& c : spec.mark_formula) out.push_back("mark[" + s(i) + "]." + c);
  }
  return out;
}

// Natural-scale values in `natural_labels` order.
inline std::vector<double> natural_values(const Parameters& p, const ModelSpec& spec) {
  std::vector<double> out;
  const std::size_t n = spec.n_states;
  for (double d : p.delta) out.push_back(d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      out.push_back(p.q[i][j].base);
      out.insert(out.end(), p.q[i][j].slopes.begin(), p.q[i][j].slopes.end());
    }
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back(p.lambda[i].base);
    out.insert(out.end(), p.lambda[i].slopes.begin(), p.lambda[i].slopes.end());
  }
  for (std::size_t i = 0; i < n; ++i) {
    out.insert(out.end(), p.marks[i].natural.begin(), p.marks[i].natural.end());
    out.insert(out.end(), p.marks[i].mean_slopes.begin(), p.marks[i].mean_slopes.end());
  }
  return out;
}

struct MonteCarloInterval {
  double mean = 0.0;
  double lower = 0.0;
  double upper = 0.0;
  bool covariance_corrected = false;
};

// Working vectors drawn from N(working_estimates, covariance).
inline std::vector<Vector> draw_working(const FitResult& fit, std::size_t n_draws, std::uint64_t seed,
                                        bool& corrected) {
  if (!fit.has_covariance()) throw EstimationError("no covariance available for Monte Carlo draws");
  const Eigen::Index k = fit.working_estimates.size();
  Matrix cov = 0.5 * (fit.covariance + fit.covariance.transpose());
  Eigen::LLT<Matrix> llt(cov);
  corrected = llt.info() != Eigen::Success;
  Matrix root;
  if (corrected) {
    Eigen::SelfAdjointEigenSolver<Matrix> eig(cov);
    const Vector ev = eig.eigenvalues().cwiseMax(1e-10);
    root = eig.eigenvectors() * ev.cwiseSqrt().asDiagonal();
  } else {
    root = llt.matrixL();
  }
  RandomStream rng(seed, 0xd4a3);
  std::vector<Vector> out(n_draws);
  Vector z(k);
  for (auto& w : out) {
    for (Eigen::Index i = 0; i < k; ++i) z[i] = rng.normal();
    w = fit.working_estimates + root * z;
  }
  return out;
}

// Vector-valued version: every output shares the same draws.
inline std::vector<MonteCarloInterval> monte_carlo_derived_cis(
    const FitResult& fit, const std::function<std::vector<double>(const Parameters&)>& derived,
    std::size_t n_draws, std::uint64_t seed, double level) {
  if (n_draws < 2) throw ValidationError("n_draws", "must be >= 2");
  if (!(level > 0.0 && level < 1.0)) throw ValidationError("level", "must lie in (0, 1)");
  bool corrected = false;
  const auto draws = draw_working(fit, n_draws, seed, corrected);
  std::vector<std::vector<double>> values;
  values.reserve(n_draws);
  for (const auto& w : draws) values.push_back(derived(to_natural(w, fit.spec)));
  const std::size_t m = values.front().size();
  std::vector<MonteCarloInterval> out(m);
  std::vector<double> column(n_draws);
  for (std::size_t j = 0; j < m; ++j) {
    for (std::size_t d = 0; d < n_draws; ++d) column[d] = values[d][j];
    std::sort(column.begin(), column.end());
    out[j].mean = mmmpp::mean(column);
    out[j].lower = quantile_sorted(column, 0.5 * (1.0 - level));
    out[j].upper = quantile_sorted(column, 0.5 * (1.0 + level));
    out[j].covariance_corrected = corrected;
  }
  return out;
}

inline MonteCarloInterval monte_carlo_derived_ci(const FitResult& fit,
                                                 const std::function<double(const Parameters&)>& derived,
                                                 std::size_t n_draws, std::uint64_t seed, double level) {
  return monte_carlo_derived_cis(
      fit, [&](const Parameters& p) { return std::vector<double>{derived(p)}; }, n_draws, seed, level)[0];
}

// Wald intervals on the working scale mapped through the (increasing)
// links. For N = 2 the delta entries follow from the single logit
// coordinate; for N > 2 they come from Monte Carlo quantiles.
inline std::vector<NaturalInterval> confidence_intervals(const FitResult& fit, double level = 0.95) {
  if (!(level > 0.0 && level < 1.0)) throw ValidationError("level", "must lie in (0, 1)");
  if (!fit.has_covariance()) throw EstimationError("confidence_intervals: information not available");
  const ModelSpec& spec = fit.spec;
  const WorkingLayout l = WorkingLayout::of(spec);
  const std::size_t n = spec.n_states;
  const double z = normal_quantile(0.5 * (1.0 + level));
  const Vector& w = fit.working_estimates;
  const Vector& se = fit.standard_errors;
  const bool reliable = fit.information_positive_definite;
  const auto labels = natural_labels(spec);
  const auto values = natural_values(fit.estimates, spec);
  std::vector<NaturalInterval> out;
  std::size_t label = 0;
  auto push = [&](double lo, double hi) {
    NaturalInterval iv;
    iv.name = labels[label];
    iv.estimate = values[label];
    iv.lower = std::min(lo, hi);
    iv.upper = std::max(lo, hi);
    iv.reliable = reliable;
    out.push_back(iv);
    ++label;
  };
  auto logistic = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };

  if (n == 1) {
    push(1.0, 1.0);
  } else if (n == 2) {
    const double lo = w[0] - z * se[0], hi = w[0] + z * se[0];
    push(1.0 - logistic(hi), 1.0 - logistic(lo));
    push(logistic(lo), logistic(hi));
  } else {
    auto deltas = monte_carlo_derived_cis(
        fit, [](const Parameters& p) { return p.delta; }, 4000, 0x5eed, level);
    for (const auto& d : deltas) push(d.lower, d.upper);
  }
  auto coord = [&](std::size_t at, bool log_link) {
    const auto i = static_cast<Eigen::Index>(at);
    const double lo = w[i] - z * se[i], hi = w[i] + z * se[i];
    if (log_link) {
      push(std::exp(lo), std::exp(hi));
    } else {
      push(lo, hi);
    }
  };
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      const std::size_t at = l.q_index(i, j);
      coord(at, true);
      for (std::size_t c = 0; c < spec.q_formula.size(); ++c) coord(at + 1 + c, false);
    }
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t at = l.lambda_index(i);
    coord(at, true);
    for (std::size_t c = 0; c < spec.lambda_formula.size(); ++c) coord(at + 1 + c, false);
  }
  const MarkFamily& fam = spec.family();
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t at = l.mark_index(i);
    for (std::size_t k = 0; k < l.mark_family_size; ++k) {
      const auto idx = static_cast<Eigen::Index>(at + k);
      push(fam.link_inverse(k, w[idx] - z * se[idx]), fam.link_inverse(k, w[idx] + z * se[idx]));
    }
    for (std::size_t c = 0; c < spec.mark_formula.size(); ++c) coord(at + l.mark_family_size + c, false);
  }
  return out;
}

}  // namespace mmmpp
