#pragma once

#include <cmath>
#include <limits>

#include <boost/math/special_functions/digamma.hpp>
#include <boost/math/special_functions/gamma.hpp>
#include <boost/math/special_functions/trigamma.hpp>

namespace countvb::special {

// glibc's lgamma writes the global `signgam`; the Boost routine is
// reentrant, which matters when replicates run on several threads.
inline double lgamma(double x) { return boost::math::lgamma(x); }

inline double digamma(double x) { return boost::math::digamma(x); }

inline double trigamma(double x) { return boost::math::trigamma(x); }

inline double log_factorial(double k) { return boost::math::lgamma(k + 1.0); }

inline constexpr double kLogSqrt2Pi = 0.918938533204672741780329736406;
inline constexpr double kPi = 3.14159265358979323846264338328;
inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

/// log(exp(a) + exp(b)) without overflow.
inline double log_add_exp(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double hi = a > b ? a : b;
  const double lo = a > b ? b : a;
  return hi + std::log1p(std::exp(lo - hi));
}

/// Standard Normal density.
inline double normal_pdf(double x, double mean = 0.0, double sd = 1.0) {
  const double z = (x - mean) / sd;
  return std::exp(-0.5 * z * z - kLogSqrt2Pi) / sd;
}

}  // namespace countvb::special
