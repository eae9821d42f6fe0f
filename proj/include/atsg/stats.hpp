#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include "atsg/errors.hpp"

namespace atsg {

namespace detail {

// Continued fraction for the incomplete beta function, evaluated with the
// modified Lentz method (Numerical Recipes 6.4 form).
inline double incomplete_beta_cf(double a, double b, double x) {
  constexpr int max_iter = 10000;
  constexpr double eps = 1e-16;
  constexpr double tiny = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < tiny) d = tiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= max_iter; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < eps) return h;
  }
  throw NumericError("incomplete beta continued fraction did not converge");
}

}  // namespace detail

/// Regularized incomplete beta I_x(a, b) for a, b > 0 and x in [0, 1].
inline double regularized_incomplete_beta(double a, double b, double x) {
  if (!(a > 0.0) || !(b > 0.0)) throw ContractError("incomplete beta: a and b must be positive");
  if (!(x >= 0.0 && x <= 1.0)) throw ContractError("incomplete beta: x must lie in [0,1]");
  if (x == 0.0) return 0.0;
  if (x == 1.0) return 1.0;
  const double log_front =
      std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(log_front);
  // The fraction converges fast for x < (a+1)/(a+b+2); use the symmetry
  // I_x(a,b) = 1 − I_{1−x}(b,a) on the other side.
  if (x < (a + 1.0) / (a + b + 2.0)) return front * detail::incomplete_beta_cf(a, b, x) / a;
  return 1.0 - front * detail::incomplete_beta_cf(b, a, 1.0 - x) / b;
}

/// Two-sided tail probability P(|T| ≥ |t|) for Student's t with `dof`
/// degrees of freedom: I_{ν/(ν+t²)}(ν/2, 1/2).
inline double student_t_two_sided_p(double t, double dof) {
  if (!(dof > 0.0)) throw ContractError("student t: dof must be positive");
  if (std::isinf(t)) return 0.0;
  return regularized_incomplete_beta(dof / 2.0, 0.5, dof / (dof + t * t));
}

struct TTestResult {
  double t = 0.0;
  double p = 1.0;
  std::size_t dof = 0;
};

/// Classical paired t-test on the differences a_i − b_i.
inline TTestResult paired_t_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("paired_t_test: samples have different lengths");
  const std::size_t n = a.size();
  if (n < 2) throw ContractError("paired_t_test: need at least two pairs");
  double mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) mean += a[i] - b[i];
  mean /= static_cast<double>(n);
  double ss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = a[i] - b[i] - mean;
    ss += d * d;
  }
  const double var = ss / static_cast<double>(n - 1);
  // Differences that agree to rounding have no usable variance.
  const double scale = std::max(std::abs(mean), 1e-300);
  if (!(var > 0.0) || std::sqrt(var) <= 64.0 * std::numeric_limits<double>::epsilon() * scale)
    throw DegenerateError("paired_t_test: differences have zero variance");
  TTestResult r;
  r.dof = n - 1;
  r.t = mean / std::sqrt(var / static_cast<double>(n));
  r.p = student_t_two_sided_p(r.t, static_cast<double>(r.dof));
  return r;
}

struct MeanStd {
  double mean = std::numeric_limits<double>::quiet_NaN();
  double std = std::numeric_limits<double>::quiet_NaN();
  std::size_t count = 0;
};

/// Mean and sample standard deviation (n−1) of the finite entries; the std of
/// a single value is 0.
inline MeanStd mean_std(std::span<const double> xs) {
  MeanStd r;
  double s = 0.0;
  for (double x : xs)
    if (std::isfinite(x)) {
      s += x;
      ++r.count;
    }
  if (r.count == 0) return r;
  r.mean = s / static_cast<double>(r.count);
  double ss = 0.0;
  for (double x : xs)
    if (std::isfinite(x)) ss += (x - r.mean) * (x - r.mean);
  r.std = r.count > 1 ? std::sqrt(ss / static_cast<double>(r.count - 1)) : 0.0;
  return r;
}

}  // namespace atsg
