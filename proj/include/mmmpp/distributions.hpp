#pragma once

// Mark distribution families. A family is a stateless object describing how
// its natural parameters are constrained, transformed to an unconstrained
// working scale, evaluated and sampled. The likelihood only talks to the
// `MarkFamily` interface, so adding a family means adding a subclass and a
// registry entry.

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mmmpp/error.hpp"
#include "mmmpp/random.hpp"

namespace mmmpp {

struct ShapeRate {
  double shape;
  double rate;
};

// Gamma with the given mean and standard deviation.
inline ShapeRate moments_to_shape_rate(double mu, double sigma) {
  if (!(mu > 0.0) || !std::isfinite(mu)) throw ValidationError("mu", "must be positive and finite");
  if (!(sigma > 0.0) || !std::isfinite(sigma))
    throw ValidationError("sigma", "must be positive and finite");
  const double var = sigma * sigma;
  return {mu * mu / var, mu / var};
}

inline std::pair<double, double> shape_rate_to_moments(ShapeRate g) {
  return {g.shape / g.rate, std::sqrt(g.shape) / g.rate};
}

// Point mass `pi0` at exactly zero, otherwise Gamma with mean `mu` and
// standard deviation `sigma`.
struct ZeroAdjustedGamma {
  double pi0;
  double mu;
  double sigma;

  void validate() const {
    if (!(pi0 > 0.0 && pi0 < 1.0)) throw ValidationError("pi0", "must lie in (0, 1)");
    if (!(mu > 0.0) || !std::isfinite(mu)) throw ValidationError("mu", "must be positive and finite");
    if (!(sigma > 0.0) || !std::isfinite(sigma))
      throw ValidationError("sigma", "must be positive and finite");
  }
};

inline double zag_logdensity(double y, const ZeroAdjustedGamma& p) {
  if (!(y >= 0.0)) throw DomainError("zero-adjusted gamma: mark must be >= 0");
  if (y == 0.0) return std::log(p.pi0);
  const auto [shape, rate] = moments_to_shape_rate(p.mu, p.sigma);
  return std::log1p(-p.pi0) + shape * std::log(rate) - std::lgamma(shape) +
         (shape - 1.0) * std::log(y) - rate * y;
}

// pi0 may be 0 or 1 here (degenerate sampling is well defined).
inline double zag_sample(const ZeroAdjustedGamma& p, RandomStream& rng) {
  if (rng.uniform() < p.pi0) return 0.0;
  const auto [shape, rate] = moments_to_shape_rate(p.mu, p.sigma);
  double y;
  do {
    y = rng.gamma(shape) / rate;
  } while (y == 0.0);  // the positive part never produces an exact zero
  return y;
}

class MarkFamily {
 public:
  virtual ~MarkFamily() = default;

  virtual std::string_view name() const = 0;
  virtual std::size_t n_params() const = 0;
  virtual std::vector<std::string> param_names() const = 0;
  // Parameter acted on by the mark regression, through a log link.
  virtual std::size_t mean_index() const = 0;

  virtual void validate(std::span<const double> natural) const = 0;
  virtual void to_working(std::span<const double> natural, std::span<double> working) const = 0;
  virtual void to_natural(std::span<const double> working, std::span<double> natural) const = 0;
  // Maps one working coordinate to its natural value. Each link here is
  // coordinate-wise and increasing.
  virtual double link_inverse(std::size_t index, double working) const = 0;

  virtual double log_density(double y, std::span<const double> natural) const = 0;
  // Batch form; families override it to hoist per-parameter constants.
  virtual void log_density(std::span<const double> y, std::span<const double> natural,
                           std::span<double> out) const {
    for (std::size_t k = 0; k < y.size(); ++k) out[k] = log_density(y[k], natural);
  }
  virtual double sample(std::span<const double> natural, RandomStream& rng) const = 0;

  // Moment-based starting values from marks y_k carrying frequency weights
  // w_k. Scaling every weight by 2 must leave the result bit-identical, so
  // that a duplicated dataset starts from the same point.
  virtual std::vector<double> initial_params(std::span<const double> values,
                                             std::span<const double> weights) const = 0;

  std::vector<double> initial_params(std::span<const double> marks) const {
    const std::vector<double> ones(marks.size(), 1.0);
    return initial_params(marks, ones);
  }
};

class ZeroAdjustedGammaFamily final : public MarkFamily {
 public:
  // Natural order: mu, sigma, pi0.
  static constexpr std::size_t kMu = 0;
  static constexpr std::size_t kSigma = 1;
  static constexpr std::size_t kPi0 = 2;

  std::string_view name() const override { return "zero-adjusted-gamma"; }
  std::size_t n_params() const override { return 3; }
  std::vector<std::string> param_names() const override { return {"mu", "sigma", "pi0"}; }
  std::size_t mean_index() const override { return kMu; }

  static ZeroAdjustedGamma unpack(std::span<const double> natural) {
    return {natural[kPi0], natural[kMu], natural[kSigma]};
  }

  void validate(std::span<const double> natural) const override {
    if (natural.size() != 3) throw LayoutError("zero-adjusted gamma expects 3 parameters");
    unpack(natural).validate();
  }

  void to_working(std::span<const double> natural, std::span<double> working) const override {
    validate(natural);
    working[kMu] = std::log(natural[kMu]);
    working[kSigma] = std::log(natural[kSigma]);
    working[kPi0] = std::log(natural[kPi0] / (1.0 - natural[kPi0]));
  }

  void to_natural(std::span<const double> working, std::span<double> natural) const override {
    for (std::size_t i = 0; i < 3; ++i) natural[i] = link_inverse(i, working[i]);
  }

  double link_inverse(std::size_t index, double w) const override {
    if (index == kPi0) return w >= 0.0 ? 1.0 / (1.0 + std::exp(-w)) : std::exp(w) / (1.0 + std::exp(w));
    return std::exp(w);
  }

  double log_density(double y, std::span<const double> natural) const override {
    return zag_logdensity(y, unpack(natural));
  }

  void log_density(std::span<const double> y, std::span<const double> natural,
                   std::span<double> out) const override {
    const ZeroAdjustedGamma p = unpack(natural);
    const auto [shape, rate] = moments_to_shape_rate(p.mu, p.sigma);
    const double log_zero = std::log(p.pi0);
    const double log_const = std::log1p(-p.pi0) + shape * std::log(rate) - std::lgamma(shape);
    for (std::size_t k = 0; k < y.size(); ++k) {
      const double v = y[k];
      if (!(v >= 0.0)) throw DomainError("zero-adjusted gamma: mark must be >= 0");
      out[k] = v == 0.0 ? log_zero : log_const + (shape - 1.0) * std::log(v) - rate * v;
    }
  }

  double sample(std::span<const double> natural, RandomStream& rng) const override {
    return zag_sample(unpack(natural), rng);
  }

  using MarkFamily::initial_params;

  // Weighted population moments of the positive part; the zero share is the
  // weight fraction at zero.
  std::vector<double> initial_params(std::span<const double> values,
                                     std::span<const double> weights) const override {
    if (weights.size() != values.size()) throw LayoutError("initial_params: one weight per value required");
    double zero_w = 0.0, pos_w = 0.0, sum = 0.0;
    std::size_t distinct_positive = 0;
    for (std::size_t k = 0; k < values.size(); ++k) {
      if (!(weights[k] > 0.0)) continue;
      if (values[k] == 0.0) {
        zero_w += weights[k];
      } else {
        pos_w += weights[k];
        sum += weights[k] * values[k];
        ++distinct_positive;
      }
    }
    const double total = zero_w + pos_w;
    double pi0 = total > 0.0 ? zero_w / total : 0.5;
    pi0 = std::clamp(pi0, 0.05, 0.95);
    double mu = 1.0;
    double sigma = 1.0;
    if (distinct_positive >= 2) {
      mu = sum / pos_w;
      double ss = 0.0;
      for (std::size_t k = 0; k < values.size(); ++k)
        if (values[k] != 0.0 && weights[k] > 0.0) ss += weights[k] * (values[k] - mu) * (values[k] - mu);
      sigma = std::sqrt(ss / pos_w);
      if (!(sigma > 0.0)) sigma = mu;
    }
    return {mu, sigma, pi0};
  }
};

// Looks up a family by identifier; the returned object lives for the
// duration of the program.
inline const MarkFamily& mark_family(std::string_view name) {
  static const ZeroAdjustedGammaFamily zag;
  if (name == zag.name()) return zag;
  throw ValidationError("mark_family", "unknown mark family '" + std::string(name) + "'");
}

}  // namespace mmmpp
