#pragma once

// Limited-memory BFGS minimiser with central-difference gradients and a
// backtracking Armijo line search that also tries to expand accepted full
// steps. Objective evaluations that throw or return non-finite values are
// treated as +inf, so the line search simply backs away from them.

#include <cmath>
#include <algorithm>
#include <deque>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "mmmpp/linalg.hpp"

namespace mmmpp {

using Objective = std::function<double(const Vector&)>;

struct LbfgsSettings {
  std::size_t max_iters = 500;
  double gradient_tolerance = 1e-6;  // on the infinity norm of the gradient
  std::size_t memory = 10;
  double min_relative_decrease = 1e-14;  // stall detection
};

struct LbfgsResult {
  Vector x;
  double value = 0.0;
  Vector gradient;
  bool converged = false;
  std::string message;
  std::size_t iterations = 0;
  std::size_t evaluations = 0;
};

inline double safe_eval(const Objective& f, const Vector& x) {
  try {
    const double v = f(x);
    return std::isfinite(v) ? v : std::numeric_limits<double>::infinity();
  } catch (const std::exception&) {
    return std::numeric_limits<double>::infinity();
  }
}

// Central differences with step 1e-5 * max(1, |x_k|).
inline Vector central_gradient(const Objective& f, const Vector& x, std::size_t* evaluations = nullptr) {
  Vector g(x.size());
  Vector xp = x;
  for (Eigen::Index k = 0; k < x.size(); ++k) {
    const double h = 1e-5 * std::max(1.0, std::abs(x[k]));
    const double up = x[k] + h;
    const double down = x[k] - h;
    xp[k] = up;
    const double fp = safe_eval(f, xp);
    xp[k] = down;
    const double fm = safe_eval(f, xp);
    xp[k] = x[k];
    g[k] = (fp - fm) / (up - down);
  }
  if (evaluations) *evaluations += 2 * static_cast<std::size_t>(x.size());
  return g;
}

inline LbfgsResult lbfgs_minimize(const Objective& f, Vector x, const LbfgsSettings& settings) {
  LbfgsResult res;
  double fx = safe_eval(f, x);
  ++res.evaluations;
  if (!std::isfinite(fx)) {
    res.x = x;
    res.value = fx;
    res.message = "objective not finite at the starting point";
    return res;
  }
  Vector g = central_gradient(f, x, &res.evaluations);
  std::deque<Vector> s_hist, y_hist;
  std::deque<double> rho_hist;
  std::size_t stalls = 0;

  for (res.iterations = 0; res.iterations < settings.max_iters; ++res.iterations) {
    if (!g.allFinite()) {
      res.message = "gradient not finite";
      break;
    }
    if (g.lpNorm<Eigen::Infinity>() <= settings.gradient_tolerance) {
      res.converged = true;
      res.message = "gradient tolerance reached";
      break;
    }

    // Two-loop recursion.
    Vector d = -g;
    std::vector<double> alpha(s_hist.size());
    for (std::size_t k = s_hist.size(); k-- > 0;) {
      alpha[k] = rho_hist[k] * s_hist[k].dot(d);
      d -= alpha[k] * y_hist[k];
    }
    if (!s_hist.empty()) d *= s_hist.back().dot(y_hist.back()) / y_hist.back().squaredNorm();
    for (std::size_t k = 0; k < s_hist.size(); ++k) {
      const double beta = rho_hist[k] * y_hist[k].dot(d);
      d += s_hist[k] * (alpha[k] - beta);
    }
    double slope = g.dot(d);
    if (!(slope < 0.0)) {
      s_hist.clear();
      y_hist.clear();
      rho_hist.clear();
      d = -g;
      slope = g.dot(d);
    }

    // First iteration: cap the step so no coordinate moves by more than 1.
    double step = 1.0;
    if (s_hist.empty()) step = std::min(1.0, 1.0 / d.lpNorm<Eigen::Infinity>());

    constexpr double c1 = 1e-4;
    Vector x_new = x + step * d;
    double f_new = safe_eval(f, x_new);
    ++res.evaluations;
    bool accepted = f_new <= fx + c1 * step * slope;
    if (accepted && step == 1.0) {
      // Expand while the decrease keeps improving.
      for (int e = 0; e < 10; ++e) {
        const Vector x_try = x + 2.0 * step * d;
        const double f_try = safe_eval(f, x_try);
        ++res.evaluations;
        if (!(f_try < f_new)) break;
        step *= 2.0;
        x_new = x_try;
        f_new = f_try;
      }
    }
    for (int b = 0; !accepted && b < 60; ++b) {
      // Quadratic interpolation, safeguarded to [0.1, 0.5] of the step.
      double next = step * 0.5;
      if (std::isfinite(f_new)) {
        const double denom = 2.0 * (f_new - fx - slope * step);
        if (denom > 0.0) next = std::clamp(-slope * step * step / denom, 0.1 * step, 0.5 * step);
      }
      step = next;
      x_new = x + step * d;
      f_new = safe_eval(f, x_new);
      ++res.evaluations;
      accepted = f_new <= fx + c1 * step * slope;
    }
    if (!accepted) {
      res.message = "line search failed";
      break;
    }

    const Vector g_new = central_gradient(f, x_new, &res.evaluations);
    const Vector s = x_new - x;
    const Vector y = g_new - g;
    const double sy = s.dot(y);
    if (sy > 1e-12 * s.norm() * y.norm()) {
      s_hist.push_back(s);
      y_hist.push_back(y);
      rho_hist.push_back(1.0 / sy);
      if (s_hist.size() > settings.memory) {
        s_hist.pop_front();
        y_hist.pop_front();
        rho_hist.pop_front();
      }
    }
    const double decrease = fx - f_new;
    x = x_new;
    g = g_new;
    stalls = decrease <= settings.min_relative_decrease * std::max(1.0, std::abs(fx)) ? stalls + 1 : 0;
    fx = f_new;
    if (stalls >= 5) {
      res.message = "no further progress";
      break;
    }
  }
  if (res.message.empty()) res.message = "iteration limit reached";
  // A stalled search whose gradient is within 10x of the tolerance is at the
  // resolution limit of the finite-difference gradient.
  if (!res.converged && g.allFinite() && g.lpNorm<Eigen::Infinity>() <= 10.0 * settings.gradient_tolerance &&
      res.message != "iteration limit reached") {
    res.converged = true;
    res.message += " (gradient within 10x tolerance)";
  }
  res.x = x;
  res.value = fx;
  res.gradient = g;
  return res;
}

}  // namespace mmmpp
