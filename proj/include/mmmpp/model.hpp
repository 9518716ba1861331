#pragma once

// Model family, parameter containers and the natural <-> working transform.
//
// Working-vector layout (version "mmmpp-working-v1"), blocks in this order:
//
//   delta  : N-1 entries, log(delta_k / delta_1) for k = 2..N
//   q      : for each ordered pair (i, j), i != j, row-major over i then j:
//            [log base rate, slope for each q_formula covariate]
//   lambda : for each state i: [log base rate, slope for each lambda_formula covariate]
//   mark   : for each state i: the family's working parameters, followed by
//            one slope per mark_formula covariate on the family's mean
//
// Slopes are regression coefficients and pass through unchanged.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mmmpp/distributions.hpp"
#include "mmmpp/error.hpp"
#include "mmmpp/linalg.hpp"

namespace mmmpp {

inline constexpr const char* kWorkingLayoutVersion = "mmmpp-working-v1";

using CovariateMap = std::map<std::string, double, std::less<>>;

enum class Censoring { kEventTerminated, kIntervalCensoredTail };

inline const char* to_string(Censoring c) {
  return c == Censoring::kEventTerminated ? "event-terminated" : "interval-censored-tail";
}

inline Censoring censoring_from_string(std::string_view s) {
  if (s == "event-terminated") return Censoring::kEventTerminated;
  if (s == "interval-censored-tail") return Censoring::kIntervalCensoredTail;
  throw ValidationError("censoring", "unknown censoring option '" + std::string(s) + "'");
}

struct ModelSpec {
  std::size_t n_states = 1;
  std::string mark_family = "zero-adjusted-gamma";
  std::vector<std::string> q_formula;
  std::vector<std::string> lambda_formula;
  std::vector<std::string> mark_formula;
  Censoring censoring = Censoring::kEventTerminated;
  std::string time_unit = "days";

  const MarkFamily& family() const { return mmmpp::mark_family(mark_family); }

  void validate() const {
    if (n_states < 1) throw ValidationError("n_states", "must be >= 1");
    (void)family();
    auto check_unique = [](const std::vector<std::string>& f, const char* field) {
      for (std::size_t i = 0; i < f.size(); ++i) {
        if (f[i].empty()) throw ValidationError(field, "empty covariate name");
        for (std::size_t j = 0; j < i; ++j)
          if (f[i] == f[j]) throw ValidationError(field, "duplicate covariate '" + f[i] + "'");
      }
    };
    check_unique(q_formula, "q_formula");
    check_unique(lambda_formula, "lambda_formula");
    check_unique(mark_formula, "mark_formula");
  }

  // Every distinct covariate referenced by any formula.
  std::vector<std::string> covariate_names() const {
    std::vector<std::string> names;
    for (const auto* f : {&q_formula, &lambda_formula, &mark_formula})
      for (const auto& n : *f)
        if (std::find(names.begin(), names.end(), n) == names.end()) names.push_back(n);
    return names;
  }
};

// rate(z) = base * exp(slopes . z)
struct RateRegression {
  double base = 1.0;
  std::vector<double> slopes;

  double at(std::span<const double> z) const {
    double eta = 0.0;
    for (std::size_t k = 0; k < slopes.size(); ++k) eta += slopes[k] * z[k];
    return base * std::exp(eta);
  }
};

struct MarkParams {
  std::vector<double> natural;      // family order, mean at covariates = 0
  std::vector<double> mean_slopes;  // one per mark_formula covariate
};

struct Parameters {
  std::vector<double> delta;
  // q[i][j] for i != j; diagonal entries are unused.
  std::vector<std::vector<RateRegression>> q;
  std::vector<RateRegression> lambda;
  std::vector<MarkParams> marks;

  std::size_t n_states() const { return delta.size(); }

  void validate(const ModelSpec& spec) const {
    const std::size_t n = spec.n_states;
    if (delta.size() != n) throw ValidationError("delta", "length must equal n_states");
    double sum = 0.0;
    for (double d : delta) {
      if (!(d > 0.0) || !std::isfinite(d)) throw ValidationError("delta", "entries must be positive");
      sum += d;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw ValidationError("delta", "must sum to 1");
    if (q.size() != n) throw ValidationError("q_coeffs", "must have n_states rows");
    for (std::size_t i = 0; i < n; ++i) {
      if (q[i].size() != n) throw ValidationError("q_coeffs", "must have n_states columns");
      for (std::size_t j = 0; j < n; ++j) {
        if (i == j) continue;
        const auto field = "q_coeffs[" + std::to_string(i + 1) + "," + std::to_string(j + 1) + "]";
        if (!(q[i][j].base > 0.0) || !std::isfinite(q[i][j].base))
          throw ValidationError(field, "base rate must be positive");
        if (q[i][j].slopes.size() != spec.q_formula.size())
          throw ValidationError(field, "slope count must match q_formula");
      }
    }
    if (lambda.size() != n) throw ValidationError("lambda_coeffs", "length must equal n_states");
    for (std::size_t i = 0; i < n; ++i) {
      const auto field = "lambda_coeffs[" + std::to_string(i + 1) + "]";
      if (!(lambda[i].base > 0.0) || !std::isfinite(lambda[i].base))
        throw ValidationError(field, "base rate must be positive");
      if (lambda[i].slopes.size() != spec.lambda_formula.size())
        throw ValidationError(field, "slope count must match lambda_formula");
    }
    if (marks.size() != n) throw ValidationError("mark_params", "length must equal n_states");
    const MarkFamily& fam = spec.family();
    for (std::size_t i = 0; i < n; ++i) {
      const auto field = "mark_params[" + std::to_string(i + 1) + "]";
      if (marks[i].natural.size() != fam.n_params())
        throw ValidationError(field, "parameter count must match the mark family");
      try {
        fam.validate(marks[i].natural);
      } catch (const ValidationError& e) {
        throw ValidationError(field + "." + e.field(), "violates family constraint");
      }
      if (marks[i].mean_slopes.size() != spec.mark_formula.size())
        throw ValidationError(field, "slope count must match mark_formula");
    }
  }
};

// Parameters with every base rate, mark parameter and slope at their
// working-scale zero (uniform delta, unit rates).
inline Parameters default_parameters(const ModelSpec& spec) {
  const std::size_t n = spec.n_states;
  Parameters p;
  p.delta.assign(n, 1.0 / static_cast<double>(n));
  p.q.assign(n, std::vector<RateRegression>(n));
  for (auto& row : p.q)
    for (auto& r : row) r.slopes.assign(spec.q_formula.size(), 0.0);
  p.lambda.assign(n, RateRegression{1.0, std::vector<double>(spec.lambda_formula.size(), 0.0)});
  const MarkFamily& fam = spec.family();
  std::vector<double> w(fam.n_params(), 0.0);
  MarkParams mp;
  mp.natural.resize(fam.n_params());
  fam.to_natural(w, mp.natural);
  mp.mean_slopes.assign(spec.mark_formula.size(), 0.0);
  p.marks.assign(n, mp);
  return p;
}

struct WorkingLayout {
  std::size_t n_states = 0;
  std::size_t delta_offset = 0;
  std::size_t q_offset = 0;
  std::size_t q_per_pair = 0;
  std::size_t lambda_offset = 0;
  std::size_t lambda_per_state = 0;
  std::size_t mark_offset = 0;
  std::size_t mark_family_size = 0;
  std::size_t mark_per_state = 0;
  std::size_t size = 0;

  static WorkingLayout of(const ModelSpec& spec) {
    WorkingLayout l;
    const std::size_t n = spec.n_states;
    l.n_states = n;
    l.delta_offset = 0;
    l.q_offset = n - 1;
    l.q_per_pair = 1 + spec.q_formula.size();
    l.lambda_offset = l.q_offset + n * (n - 1) * l.q_per_pair;
    l.lambda_per_state = 1 + spec.lambda_formula.size();
    l.mark_offset = l.lambda_offset + n * l.lambda_per_state;
    l.mark_family_size = spec.family().n_params();
    l.mark_per_state = l.mark_family_size + spec.mark_formula.size();
    l.size = l.mark_offset + n * l.mark_per_state;
    return l;
  }

  // Position of pair (i, j) within the q block, i != j.
  std::size_t q_index(std::size_t i, std::size_t j) const {
    const std::size_t pair = i * (n_states - 1) + (j < i ? j : j - 1);
    return q_offset + pair * q_per_pair;
  }
  std::size_t lambda_index(std::size_t i) const { return lambda_offset + i * lambda_per_state; }
  std::size_t mark_index(std::size_t i) const { return mark_offset + i * mark_per_state; }
};

// Human-readable label of every working coordinate, in layout order.
inline std::vector<std::string> working_labels(const ModelSpec& spec) {
  const WorkingLayout l = WorkingLayout::of(spec);
  std::vector<std::string> out(l.size);
  const std::size_t n = spec.n_states;
  auto s = [](std::size_t i) { return std::to_string(i + 1); };
  for (std::size_t k = 1; k < n; ++k) out[l.delta_offset + k - 1] = "log(delta[" + s(k) + "]/delta[1])";
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      const std::size_t at = l.q_index(i, j);
      out[at] = "log q[" + s(i) + "," + s(j) + "]";
      for (std::size_t c = 0; c < spec.q_formula.size(); ++c)
        out[at + 1 + c] = "q[" + s(i) + "," + s(j) + "]." + spec.q_formula[c];
    }
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t at = l.lambda_index(i);
    out[at] = "log lambda[" + s(i) + "]";
    for (std::size_t c = 0; c < spec.lambda_formula.size(); ++c)
      out[at + 1 + c] = "lambda[" + s(i) + "]." + spec.lambda_formula[c];
  }
  const auto names = spec.family().param_names();
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t at = l.mark_index(i);
    for (std::size_t k = 0; k < names.size(); ++k) out[at + k] = "w(" + names[k] + "[" + s(i) + "])";
    for (std::size_t c = 0; c < spec.mark_formula.size(); ++c)
      out[at + names.size() + c] = "mark[" + s(i) + "]." + spec.mark_formula[c];
  }
  return out;
}

inline Vector to_working(const Parameters& params, const ModelSpec& spec) {
  spec.validate();
  params.validate(spec);
  const WorkingLayout l = WorkingLayout::of(spec);
  const std::size_t n = spec.n_states;
  Vector w(static_cast<Eigen::Index>(l.size));
  for (std::size_t k = 1; k < n; ++k)
    w[static_cast<Eigen::Index>(l.delta_offset + k - 1)] = std::log(params.delta[k] / params.delta[0]);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      const auto at = static_cast<Eigen::Index>(l.q_index(i, j));
      w[at] = std::log(params.q[i][j].base);
      for (std::size_t c = 0; c < spec.q_formula.size(); ++c)
        w[at + 1 + static_cast<Eigen::Index>(c)] = params.q[i][j].slopes[c];
    }
  for (std::size_t i = 0; i < n; ++i) {
    const auto at = static_cast<Eigen::Index>(l.lambda_index(i));
    w[at] = std::log(params.lambda[i].base);
    for (std::size_t c = 0; c < spec.lambda_formula.size(); ++c)
      w[at + 1 + static_cast<Eigen::Index>(c)] = params.lambda[i].slopes[c];
  }
  const MarkFamily& fam = spec.family();
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t at = l.mark_index(i);
    fam.to_working(params.marks[i].natural, std::span<double>(w.data() + at, l.mark_family_size));
    for (std::size_t c = 0; c < spec.mark_formula.size(); ++c)
      w[static_cast<Eigen::Index>(at + l.mark_family_size + c)] = params.marks[i].mean_slopes[c];
  }
  return w;
}

inline Parameters to_natural(const Vector& w, const ModelSpec& spec) {
  spec.validate();
  const WorkingLayout l = WorkingLayout::of(spec);
  if (static_cast<std::size_t>(w.size()) != l.size)
    throw LayoutError("working vector has length " + std::to_string(w.size()) + ", layout expects " +
                      std::to_string(l.size));
  if (!w.allFinite()) throw LayoutError("working vector has non-finite entries");
  const std::size_t n = spec.n_states;
  Parameters p;

  // Multinomial logit with state 1 as reference, evaluated stably.
  double shift = 0.0;
  for (std::size_t k = 1; k < n; ++k) shift = std::max(shift, w[static_cast<Eigen::Index>(k - 1)]);
  p.delta.resize(n);
  p.delta[0] = std::exp(-shift);
  double total = p.delta[0];
  for (std::size_t k = 1; k < n; ++k) {
    p.delta[k] = std::exp(w[static_cast<Eigen::Index>(l.delta_offset + k - 1)] - shift);
    total += p.delta[k];
  }
  for (double& d : p.delta) d /= total;

  p.q.assign(n, std::vector<RateRegression>(n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      const auto at = static_cast<Eigen::Index>(l.q_index(i, j));
      p.q[i][j].base = std::exp(w[at]);
      p.q[i][j].slopes.resize(spec.q_formula.size());
      for (std::size_t c = 0; c < spec.q_formula.size(); ++c)
        p.q[i][j].slopes[c] = w[at + 1 + static_cast<Eigen::Index>(c)];
    }
  p.lambda.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto at = static_cast<Eigen::Index>(l.lambda_index(i));
    p.lambda[i].base = std::exp(w[at]);
    p.lambda[i].slopes.resize(spec.lambda_formula.size());
    for (std::size_t c = 0; c < spec.lambda_formula.size(); ++c)
      p.lambda[i].slopes[c] = w[at + 1 + static_cast<Eigen::Index>(c)];
  }
  const MarkFamily& fam = spec.family();
  p.marks.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t at = l.mark_index(i);
    p.marks[i].natural.resize(l.mark_family_size);
    fam.to_natural(std::span<const double>(w.data() + at, l.mark_family_size), p.marks[i].natural);
    p.marks[i].mean_slopes.resize(spec.mark_formula.size());
    for (std::size_t c = 0; c < spec.mark_formula.size(); ++c)
      p.marks[i].mean_slopes[c] = w[static_cast<Eigen::Index>(at + l.mark_family_size + c)];
  }
  return p;
}

// Relabels states: new state k is old state perm[k].
inline Parameters permute_states(const Parameters& p, std::span<const std::size_t> perm) {
  const std::size_t n = p.n_states();
  if (perm.size() != n) throw ValidationError("permutation", "length must equal n_states");
  Parameters out = p;
  for (std::size_t a = 0; a < n; ++a) {
    out.delta[a] = p.delta[perm[a]];
    out.lambda[a] = p.lambda[perm[a]];
    out.marks[a] = p.marks[perm[a]];
    for (std::size_t b = 0; b < n; ++b) out.q[a][b] = p.q[perm[a]][perm[b]];
  }
  return out;
}

// Values of the named covariates, in formula order.
inline std::vector<double> covariate_vector(const std::vector<std::string>& formula,
                                            const CovariateMap& covariates) {
  std::vector<double> z(formula.size());
  for (std::size_t c = 0; c < formula.size(); ++c) {
    auto it = covariates.find(formula[c]);
    if (it == covariates.end()) throw CovariateError(formula[c], "covariate value missing");
    z[c] = it->second;
  }
  return z;
}

// Off-diagonals from the regression; diagonal set so every row sums to zero.
inline Matrix intensity_matrix(const Parameters& params, std::span<const double> zq) {
  const std::size_t n = params.n_states();
  Matrix q = Matrix::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      const double v = params.q[i][j].at(zq);
      q(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = v;
      row += v;
    }
    q(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i)) = -row;
  }
  return q;
}

inline Matrix intensity_matrix(const Parameters& params, const ModelSpec& spec,
                               const CovariateMap& covariates) {
  const auto z = covariate_vector(spec.q_formula, covariates);
  return intensity_matrix(params, z);
}

inline Vector event_rates(const Parameters& params, std::span<const double> zl) {
  const std::size_t n = params.n_states();
  Vector lam(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) lam[static_cast<Eigen::Index>(i)] = params.lambda[i].at(zl);
  return lam;
}

inline Vector event_rates(const Parameters& params, const ModelSpec& spec,
                          const CovariateMap& covariates) {
  const auto z = covariate_vector(spec.lambda_formula, covariates);
  return event_rates(params, z);
}

// Natural mark parameters of state i at mark covariates z.
inline std::vector<double> mark_params_at(const Parameters& params, const ModelSpec& spec,
                                          std::size_t state, std::span<const double> zm) {
  std::vector<double> natural = params.marks[state].natural;
  if (!zm.empty()) {
    double eta = 0.0;
    for (std::size_t c = 0; c < zm.size(); ++c) eta += params.marks[state].mean_slopes[c] * zm[c];
    natural[spec.family().mean_index()] *= std::exp(eta);
  }
  return natural;
}

// Right-continuous step function: value[k] holds on [start[k], start[k+1]).
struct StepFunction {
  std::vector<double> starts;
  std::vector<double> values;

  void validate(const std::string& name) const {
    if (starts.empty() || starts.size() != values.size())
      throw CovariateError(name, "step function needs matching, nonempty breakpoints and values");
    for (std::size_t k = 0; k < starts.size(); ++k) {
      if (!std::isfinite(starts[k]) || !std::isfinite(values[k]))
        throw CovariateError(name, "non-finite step function entry");
      if (k > 0 && !(starts[k] > starts[k - 1]))
        throw CovariateError(name, "breakpoints must be strictly increasing");
    }
  }

  double at(double t) const {
    if (starts.empty() || t < starts.front())
      throw CoverageError("step function does not cover t = " + std::to_string(t));
    auto it = std::upper_bound(starts.begin(), starts.end(), t);
    return values[static_cast<std::size_t>(it - starts.begin()) - 1];
  }
};

struct PatientRecord {
  std::string id;
  std::vector<double> times;  // t_0 = 0 < t_1 < ... < t_n
  std::vector<double> marks;  // y_0 .. y_n
  bool has_initial_mark = true;
  CovariateMap static_covariates;
  std::map<std::string, StepFunction, std::less<>> piecewise_covariates;
  std::optional<double> followup_end;
  double time_offset = 0.0;  // original epoch of t_0

  std::size_t n_intervals() const { return times.empty() ? 0 : times.size() - 1; }

  void validate() const {
    if (times.empty()) throw ValidationError("times", "record '" + id + "' has no events");
    if (times.front() != 0.0) throw ValidationError("times", "record '" + id + "': t_0 must be 0");
    for (std::size_t k = 1; k < times.size(); ++k)
      if (!(times[k] > times[k - 1]) || !std::isfinite(times[k]))
        throw ValidationError("times", "record '" + id + "': times must be strictly increasing");
    if (marks.size() != times.size())
      throw ValidationError("marks", "record '" + id + "': one mark per event required");
    for (std::size_t k = has_initial_mark ? 0 : 1; k < marks.size(); ++k)
      if (!(marks[k] >= 0.0) || !std::isfinite(marks[k]))
        throw ValidationError("marks", "record '" + id + "': marks must be finite and >= 0");
    for (const auto& [name, fn] : piecewise_covariates) {
      fn.validate(name);
      if (fn.starts.front() > 0.0)
        throw CoverageError("record '" + id + "': covariate '" + name + "' does not cover t = 0");
    }
    if (followup_end && !(*followup_end >= times.back()))
      throw ValidationError("followup_end", "record '" + id + "': must be >= last event time");
  }

  bool has_covariate(std::string_view name) const {
    return static_covariates.count(name) > 0 || piecewise_covariates.count(name) > 0;
  }

  double covariate_at(std::string_view name, double t) const {
    if (auto it = piecewise_covariates.find(name); it != piecewise_covariates.end())
      return it->second.at(t);
    if (auto it = static_covariates.find(name); it != static_covariates.end()) return it->second;
    throw CovariateError(std::string(name), "record '" + id + "' lacks this covariate");
  }

  std::vector<double> covariates_at(const std::vector<std::string>& formula, double t) const {
    std::vector<double> z(formula.size());
    for (std::size_t c = 0; c < formula.size(); ++c) z[c] = covariate_at(formula[c], t);
    return z;
  }
};

}  // namespace mmmpp
