#pragma once

// Model-implied summaries of the latent chain: expected sojourns, long-run
// occupancy, covariate group tables and effect curves.

#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "mmmpp/error.hpp"
#include "mmmpp/estimation.hpp"
#include "mmmpp/linalg.hpp"
#include "mmmpp/model.hpp"

namespace mmmpp {

// 1 / (-q_ii); an absorbing state has infinite expected duration.
inline Vector expected_durations(const Matrix& q) {
  Vector out(q.rows());
  for (Eigen::Index i = 0; i < q.rows(); ++i) {
    const double exit = -q(i, i);
    out[i] = exit > 0.0 ? 1.0 / exit : std::numeric_limits<double>::infinity();
  }
  return out;
}

namespace detail {

inline std::vector<bool> reachable(const Matrix& q, Eigen::Index from, bool forward) {
  const Eigen::Index n = q.rows();
  std::vector<bool> seen(static_cast<std::size_t>(n), false);
  std::vector<Eigen::Index> stack{from};
  seen[static_cast<std::size_t>(from)] = true;
  while (!stack.empty()) {
    const Eigen::Index i = stack.back();
    stack.pop_back();
    for (Eigen::Index j = 0; j < n; ++j) {
      const double rate = forward ? q(i, j) : q(j, i);
      if (j != i && rate > 0.0 && !seen[static_cast<std::size_t>(j)]) {
        seen[static_cast<std::size_t>(j)] = true;
        stack.push_back(j);
      }
    }
  }
  return seen;
}

}  // namespace detail

// pi Q = 0, sum(pi) = 1, with the last balance equation replaced by the
// normalisation.
inline Vector stationary_distribution(const Matrix& q) {
  const Eigen::Index n = q.rows();
  if (n == 0 || q.cols() != n) throw DomainError("stationary_distribution: Q must be square and nonempty");
  const auto fwd = detail::reachable(q, 0, true);
  const auto bwd = detail::reachable(q, 0, false);
  std::string bad;
  for (Eigen::Index i = 0; i < n; ++i)
    if (!fwd[static_cast<std::size_t>(i)] || !bwd[static_cast<std::size_t>(i)])
      bad += (bad.empty() ? "" : ", ") + std::to_string(i + 1);
  if (!bad.empty())
    throw ReducibleChain("generator is reducible; states not communicating with state 1: " + bad);
  Matrix a = q.transpose();
  a.row(n - 1).setOnes();
  Vector b = Vector::Zero(n);
  b[n - 1] = 1.0;
  Vector pi = a.fullPivLu().solve(b);
  for (Eigen::Index i = 0; i < n; ++i) pi[i] = std::max(pi[i], 0.0);
  return pi / pi.sum();
}

struct GroupProfile {
  std::string label;
  CovariateMap covariates;
};

struct GroupRow {
  std::string label;
  Vector durations;
  Vector shares;
  // Present when the fit carries a covariance.
  std::vector<MonteCarloInterval> duration_ci;
  std::vector<MonteCarloInterval> share_ci;
};

struct DerivedSettings {
  std::size_t n_draws = 2000;
  std::uint64_t seed = 1;
  double level = 0.95;
};

inline std::vector<GroupRow> group_table(const FitResult& fit, const std::vector<GroupProfile>& profiles,
                                         const DerivedSettings& settings = {}) {
  const ModelSpec& spec = fit.spec;
  std::vector<std::vector<double>> z(profiles.size());
  for (std::size_t g = 0; g < profiles.size(); ++g) {
    try {
      z[g] = covariate_vector(spec.q_formula, profiles[g].covariates);
    } catch (const CovariateError& e) {
      throw CovariateError(e.name(), "profile '" + profiles[g].label + "' lacks this covariate");
    }
  }
  const auto n = static_cast<Eigen::Index>(spec.n_states);
  std::vector<GroupRow> rows(profiles.size());
  for (std::size_t g = 0; g < profiles.size(); ++g) {
    const Matrix q = intensity_matrix(fit.estimates, z[g]);
    rows[g].label = profiles[g].label;
    rows[g].durations = expected_durations(q);
    rows[g].shares = stationary_distribution(q);
  }
  if (!fit.has_covariance() || profiles.empty()) return rows;

  auto derived = [&](const Parameters& p) {
    std::vector<double> out;
    out.reserve(profiles.size() * static_cast<std::size_t>(2 * n));
    for (std::size_t g = 0; g < profiles.size(); ++g) {
      const Matrix q = intensity_matrix(p, z[g]);
      const Vector d = expected_durations(q);
      const Vector s = stationary_distribution(q);
      out.insert(out.end(), d.data(), d.data() + n);
      out.insert(out.end(), s.data(), s.data() + n);
    }
    return out;
  };
  const auto cis = monte_carlo_derived_cis(fit, derived, settings.n_draws, settings.seed, settings.level);
  for (std::size_t g = 0; g < profiles.size(); ++g) {
    const std::size_t at = g * static_cast<std::size_t>(2 * n);
    rows[g].duration_ci.assign(cis.begin() + static_cast<std::ptrdiff_t>(at),
                               cis.begin() + static_cast<std::ptrdiff_t>(at + static_cast<std::size_t>(n)));
    rows[g].share_ci.assign(cis.begin() + static_cast<std::ptrdiff_t>(at + static_cast<std::size_t>(n)),
                            cis.begin() + static_cast<std::ptrdiff_t>(at + static_cast<std::size_t>(2 * n)));
  }
  return rows;
}

struct CurvePoint {
  double value = 0.0;
  double point = 0.0;  // share of state 1 at the estimates
  std::optional<MonteCarloInterval> ci;
};

// Long-run share of state 1 as `covariate` varies over `grid`, other
// covariates held at `base`. All grid points share the same draws.
inline std::vector<CurvePoint> effect_curve(const FitResult& fit, const std::string& covariate,
                                            const std::vector<double>& grid, const GroupProfile& base,
                                            const DerivedSettings& settings = {}) {
  if (grid.empty()) throw DomainError("effect_curve: empty grid");
  std::vector<GroupProfile> profiles;
  profiles.reserve(grid.size());
  for (double v : grid) {
    GroupProfile p = base;
    p.covariates[covariate] = v;
    p.label = covariate + "=" + std::to_string(v);
    profiles.push_back(std::move(p));
  }
  const ModelSpec& spec = fit.spec;
  std::vector<std::vector<double>> z(profiles.size());
  for (std::size_t g = 0; g < profiles.size(); ++g) z[g] = covariate_vector(spec.q_formula, profiles[g].covariates);
  auto shares = [&](const Parameters& p) {
    std::vector<double> out(profiles.size());
    for (std::size_t g = 0; g < profiles.size(); ++g) out[g] = stationary_distribution(intensity_matrix(p, z[g]))[0];
    return out;
  };
  const auto points = shares(fit.estimates);
  std::vector<CurvePoint> out(grid.size());
  for (std::size_t g = 0; g < grid.size(); ++g) {
    out[g].value = grid[g];
    out[g].point = points[g];
  }
  if (fit.has_covariance()) {
    const auto cis = monte_carlo_derived_cis(fit, shares, settings.n_draws, settings.seed, settings.level);
    for (std::size_t g = 0; g < grid.size(); ++g) out[g].ci = cis[g];
  }
  return out;
}

}  // namespace mmmpp
