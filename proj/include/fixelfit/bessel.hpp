#pragma once

#include <cmath>

#include "error.hpp"

namespace fixelfit {

// log I0(x) and I1(x)/I0(x) for x >= 0, both accurate to ~1e-14 relative.
//
// The ascending series has only positive terms, so it is exact up to rounding
// for any x; it is used below kBesselSwitch. Above that the Hankel asymptotic
// expansion is summed until its terms stop shrinking; at x = 20 the smallest
// term is below 1e-16.

inline constexpr double kBesselSwitch = 20.0;

namespace detail {

// Returns sum_{k>=1} (x^2/4)^k / (k!)^2, i.e. I0(x) - 1.
inline double i0_series_minus_one(double x) {
  const double q = 0.25 * x * x;
  double term = 1.0, sum = 0.0;
  for (int k = 1; k < 500; ++k) {
    term *= q / (static_cast<double>(k) * k);
    sum += term;
    if (term < 1e-17 * sum) break;
  }
  return sum;
}

// I1(x) by its ascending series.
inline double i1_series(double x) {
  const double q = 0.25 * x * x;
  double term = 0.5 * x, sum = term;
  for (int k = 1; k < 500; ++k) {
    term *= q / (static_cast<double>(k) * (k + 1));
    sum += term;
    if (term < 1e-17 * sum) break;
  }
  return sum;
}

// Sum of the asymptotic series for e^{-x} sqrt(2 pi x) I_nu(x), nu in {0, 1}.
inline double hankel_sum(double x, int nu) {
  const double mu = 4.0 * nu * nu;
  double term = 1.0, sum = 1.0;
  double prev = 1.0;
  for (int k = 1; k < 200; ++k) {
    const double odd = 2.0 * k - 1.0;
    term *= -(mu - odd * odd) / (k * 8.0 * x);
    if (std::fabs(term) >= prev) break;
    sum += term;
    prev = std::fabs(term);
    if (prev < 1e-17 * std::fabs(sum)) break;
  }
  return sum;
}

}  // namespace detail

inline double log_i0(double x) {
  if (!(x >= 0)) throw ConfigError("log_i0: argument must be non-negative");
  if (x < kBesselSwitch) return std::log1p(detail::i0_series_minus_one(x));
  return x - 0.5 * std::log(2.0 * M_PI * x) + std::log(detail::hankel_sum(x, 0));
}

// d/dx log I0(x).
inline double bessel_i1_over_i0(double x) {
  if (!(x >= 0)) throw ConfigError("bessel_i1_over_i0: argument must be non-negative");
  if (x == 0) return 0.0;
  if (x < kBesselSwitch) return detail::i1_series(x) / (1.0 + detail::i0_series_minus_one(x));
  return detail::hankel_sum(x, 1) / detail::hankel_sum(x, 0);
}

}  // namespace fixelfit
