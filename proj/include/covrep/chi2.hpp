#pragma once

// Chi-squared distribution functions built on the regularized lower
// incomplete gamma: series expansion below a+1, Lentz continued fraction
// above, quantile by bracketed bisection with a Newton polish.

#include <cmath>
#include <limits>
#include <stdexcept>

namespace covrep {

namespace detail {

inline double gamma_p_series(double a, double x) {
  double term = 1.0 / a;
  double sum = term;
  for (int n = 1; n < 500; ++n) {
    term *= x / (a + n);
    sum += term;
    if (std::fabs(term) < std::fabs(sum) * 1e-16) break;
  }
  return sum * std::exp(-x + a * std::log(x) - std::lgamma(a));
}

// Regularized upper incomplete gamma Q(a,x) by modified Lentz.
inline double gamma_q_cf(double a, double x) {
  const double tiny = 1e-300;
  double b = x + 1.0 - a;
  double c = 1.0 / tiny;
  double d = 1.0 / b;
  double h = d;
  for (int i = 1; i < 500; ++i) {
    const double an = -double(i) * (double(i) - a);
    b += 2.0;
    d = an * d + b;
    if (std::fabs(d) < tiny) d = tiny;
    c = b + an / c;
    if (std::fabs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::fabs(delta - 1.0) < 1e-16) break;
  }
  return h * std::exp(-x + a * std::log(x) - std::lgamma(a));
}

}  // namespace detail

// Regularized lower incomplete gamma P(a, x).
inline double gamma_p(double a, double x) {
  if (a <= 0.0) throw std::domain_error("gamma_p: a must be positive");
  if (x < 0.0) throw std::domain_error("gamma_p: x must be nonnegative");
  if (x == 0.0) return 0.0;
  if (x < a + 1.0) return detail::gamma_p_series(a, x);
  return 1.0 - detail::gamma_q_cf(a, x);
}

inline double chi2_cdf(double x, int df) {
  if (df < 1) throw std::domain_error("chi2_cdf: df must be >= 1");
  if (x < 0.0) throw std::domain_error("chi2_cdf: x must be nonnegative");
  return gamma_p(0.5 * df, 0.5 * x);
}

inline double chi2_pdf(double x, int df) {
  if (df < 1) throw std::domain_error("chi2_pdf: df must be >= 1");
  if (x < 0.0) return 0.0;
  if (x == 0.0) return df == 2 ? 0.5 : (df < 2 ? std::numeric_limits<double>::infinity() : 0.0);
  const double half = 0.5 * df;
  return std::exp((half - 1.0) * std::log(x) - 0.5 * x - half * std::log(2.0) -
                  std::lgamma(half));
}

// Unique x with chi2_cdf(x, df) = p; absolute tolerance 1e-12 in p.
inline double chi2_inv(double p, int df) {
  if (df < 1) throw std::domain_error("chi2_inv: df must be >= 1");
  if (p <= 0.0 || p >= 1.0) throw std::domain_error("chi2_inv: p must be in (0,1)");

  double lo = 0.0;
  double hi = df + 10.0 * std::sqrt(2.0 * df) + 50.0;
  while (chi2_cdf(hi, df) < p) hi *= 2.0;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    if (chi2_cdf(mid, df) < p)
      lo = mid;
    else
      hi = mid;
    if (hi - lo < 1e-13 * (1.0 + hi)) break;
  }
  double x = 0.5 * (lo + hi);
  for (int i = 0; i < 5; ++i) {
    const double f = chi2_cdf(x, df) - p;
    const double g = chi2_pdf(x, df);
    if (g <= 0.0) break;
    double step = f / g;
    double next = x - step;
    if (next <= lo || next >= hi) break;
    x = next;
    if (std::fabs(f) < 1e-14) break;
  }
  return x;
}

}  // namespace covrep
