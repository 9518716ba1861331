#pragma once

// Dense small-matrix utilities. The matrix exponential is scaling-and-squaring
// with Pade approximants (Higham 2005, "The scaling and squaring method for
// the matrix exponential revisited"), plus a closed form for 2x2 matrices
// with real distinct eigenvalues and nonnegative off-diagonal product, which
// covers every 2-state generator and sub-generator.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <limits>

#include "mmmpp/error.hpp"

namespace mmmpp {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

inline constexpr Eigen::Index kMaxMatexpOrder = 50;

inline double one_norm(const Matrix& a) { return a.cwiseAbs().colwise().sum().maxCoeff(); }

namespace detail {

inline void require_finite(const Matrix& a) {
  if (a.rows() != a.cols()) throw DomainError("matexp: matrix is not square");
  if (!a.allFinite()) throw DomainError("matexp: matrix has non-finite entries");
}

// Returns false when the closed form does not apply.
inline bool matexp_2x2(const Matrix& a, Matrix& out) {
  const double a11 = a(0, 0), a12 = a(0, 1), a21 = a(1, 0), a22 = a(1, 1);
  if (!(a12 * a21 >= 0.0)) return false;
  const double m = 0.5 * (a11 + a22);
  const double p = 0.5 * (a11 - a22);
  const double disc = p * p + a12 * a21;
  if (!(disc > 0.0)) return false;  // repeated eigenvalue: general path
  const double s = std::sqrt(disc);
  // e^m (cosh s +- p sinh s / s), written as e^(m-s) (1 + expm1(2s) (s +- p) / 2s)
  // with s +- p rearranged so that no term cancels.
  const double lo = std::exp(m - s);
  const double e2 = std::expm1(2.0 * s);
  const double es = lo * (0.5 * e2 / s);
  const double bc = a12 * a21;
  const double s_plus = p < 0.0 ? bc / (s - p) : s + p;
  const double s_minus = p > 0.0 ? bc / (s + p) : s - p;
  out.resize(2, 2);
  out(0, 0) = lo + es * s_plus;
  out(1, 1) = lo + es * s_minus;
  out(0, 1) = es * a12;
  out(1, 0) = es * a21;
  return out.allFinite();
}

template <std::size_t K>
Matrix pade_odd_even(const Matrix& a, const std::array<double, K>& b) {
  // Degrees 3, 5, 7, 9: explicit power accumulation.
  const Eigen::Index n = a.rows();
  const Matrix ident = Matrix::Identity(n, n);
  const Matrix a2 = a * a;
  Matrix power = ident;  // A^(2k)
  Matrix u_inner = Matrix::Zero(n, n);
  Matrix v = Matrix::Zero(n, n);
  for (std::size_t k = 0; k < K; k += 2) {
    v += b[k] * power;
    u_inner += b[k + 1] * power;
    power = power * a2;
  }
  const Matrix u = a * u_inner;
  return (v - u).partialPivLu().solve(v + u);
}

inline Matrix pade13(const Matrix& a) {
  static constexpr std::array<double, 14> b = {
      64764752532480000.0, 32382376266240000.0, 7771770303897600.0, 1187353796428800.0,
      129060195264000.0,   10559470521600.0,    670442572800.0,     33522128640.0,
      1323241920.0,        40840800.0,          960960.0,           16380.0,
      182.0,               1.0};
  const Eigen::Index n = a.rows();
  const Matrix ident = Matrix::Identity(n, n);
  const Matrix a2 = a * a;
  const Matrix a4 = a2 * a2;
  const Matrix a6 = a4 * a2;
  const Matrix u = a * (a6 * (b[13] * a6 + b[11] * a4 + b[9] * a2) + b[7] * a6 + b[5] * a4 +
                        b[3] * a2 + b[1] * ident);
  const Matrix v = a6 * (b[12] * a6 + b[10] * a4 + b[8] * a2) + b[6] * a6 + b[4] * a4 +
                   b[2] * a2 + b[0] * ident;
  return (v - u).partialPivLu().solve(v + u);
}

inline Matrix matexp_pade(const Matrix& a) {
  static constexpr std::array<double, 4> b3 = {120.0, 60.0, 12.0, 1.0};
  static constexpr std::array<double, 6> b5 = {30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0};
  static constexpr std::array<double, 8> b7 = {17297280.0, 8648640.0, 1995840.0, 277200.0,
                                               25200.0,    1512.0,    56.0,      1.0};
  static constexpr std::array<double, 10> b9 = {17643225600.0, 8821612800.0, 2075673600.0,
                                                302702400.0,   30270240.0,   2162160.0,
                                                110880.0,      3960.0,       90.0,
                                                1.0};
  constexpr double theta3 = 1.495585217958292e-2;
  constexpr double theta5 = 2.539398330063230e-1;
  constexpr double theta7 = 9.504178996162932e-1;
  constexpr double theta9 = 2.097847961257068e0;
  constexpr double theta13 = 5.371920351148152e0;

  const double norm = one_norm(a);
  if (norm <= theta3) return pade_odd_even(a, b3);
  if (norm <= theta5) return pade_odd_even(a, b5);
  if (norm <= theta7) return pade_odd_even(a, b7);
  if (norm <= theta9) return pade_odd_even(a, b9);

  const int squarings = std::max(0, static_cast<int>(std::ceil(std::log2(norm / theta13))));
  Matrix r = pade13(a * std::ldexp(1.0, -squarings));
  for (int i = 0; i < squarings; ++i) r = r * r;
  return r;
}

}  // namespace detail

// exp(A) for a small dense square matrix.
inline Matrix matexp(const Matrix& a) {
  detail::require_finite(a);
  if (a.rows() == 0) return a;
  if (a.rows() == 1) return Matrix::Constant(1, 1, std::exp(a(0, 0)));
  if (a.rows() == 2) {
    Matrix out;
    if (detail::matexp_2x2(a, out)) return out;
  }
  return detail::matexp_pade(a);
}

inline Matrix matexp(const Matrix& a, double t) { return matexp(a * t); }

// v * exp(A) for a row vector v.
inline RowVector matexp_action(const Matrix& a, const RowVector& v) {
  if (v.size() != a.rows()) throw DomainError("matexp_action: dimension mismatch");
  return v * matexp(a);
}

}  // namespace mmmpp
