#pragma once

// The special integral
//
//   H(p, q, r, s, t) = int_s^t x^p exp(q [x log x - log Gamma(x)] - r x) dx
//
// and the moments of the q-density of the Negative Binomial shape parameter,
// whose kernel is the p = 0 integrand.
//
// The log integrand h(x) = p log x + q (x log x - lgamma x) - r x is strictly
// concave on (0, inf) (h'' = -p/x^2 + q (1/x - trigamma x) < 0), so it has a
// single mode on [s, t]. The mode is bracketed by bisection on h'; the
// interval is then cut at geometric distances from the mode (in units of the
// local width) and exp(h - h_max) is integrated by globally adaptive
// Gauss-Kronrod (7, 15). For q of order 1e5 the integrand is a spike a few
// thousandths wide; working relative to h_max keeps everything representable.

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <queue>
#include <vector>

#include "countvb/errors.hpp"
#include "countvb/special.hpp"

namespace countvb {

struct HArgs {
  double p = 0.0;
  double q = 1.0;
  double r = 1.0;
  double s = 0.01;
  double t = 100.0;
};

namespace quad {

/// log integrand of H and its first two derivatives.
struct LogKernel {
  double p, q, r;

  double value(double x) const {
    const double px = p == 0.0 ? 0.0 : p * std::log(x);
    return px + q * (x * std::log(x) - special::lgamma(x)) - r * x;
  }
  double slope(double x) const {
    return p / x + q * (std::log(x) + 1.0 - special::digamma(x)) - r;
  }
  double curvature(double x) const {
    return -p / (x * x) + q * (1.0 / x - special::trigamma(x));
  }
};

inline void validate(const HArgs& a) {
  if (!(a.p >= 0.0) || !std::isfinite(a.p)) throw ParameterError("H requires p >= 0");
  if (!(a.q > 0.0) || !std::isfinite(a.q)) throw ParameterError("H requires q > 0");
  if (!std::isfinite(a.r)) throw ParameterError("H requires finite r");
  if (!(a.s > 0.0) || !(a.t > 0.0) || !std::isfinite(a.t)) {
    throw ParameterError("H requires s, t > 0");
  }
  if (a.s > a.t) throw DomainError("H requires s <= t");
}

/// Location of the maximum of a concave log kernel on [s, t].
inline double locate_mode(const LogKernel& h, double s, double t) {
  if (h.slope(s) <= 0.0) return s;
  if (h.slope(t) >= 0.0) return t;
  double lo = s;
  double hi = t;
  while (hi - lo > 1e-12 * std::max(1.0, lo)) {
    const double mid = 0.5 * (lo + hi);
    if (mid <= lo || mid >= hi) break;
    (h.slope(mid) > 0.0 ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

namespace detail {

// Gauss-Kronrod 7/15 abscissae and weights on [-1, 1].
inline constexpr std::array<double, 8> kXgk = {
    0.991455371120812639206854697526329, 0.949107912342758524526189684047851,
    0.864864423359769072789712788640926, 0.741531185599394439863864773280788,
    0.586087235467691130294144845693013, 0.405845151377397166906606412076961,
    0.207784955007898467600689403773245, 0.000000000000000000000000000000000};
inline constexpr std::array<double, 8> kWgk = {
    0.022935322010529224963732008058970, 0.063092092629978553290700663189204,
    0.104790010322250183839876322541518, 0.140653259715525918745189590510238,
    0.169004726639267902826583426598550, 0.190350578064785409913256402421014,
    0.204432940075298892414161999234649, 0.209482141084727828012999174891714};
inline constexpr std::array<double, 4> kWg = {
    0.129484966168869693270611432679082, 0.279705391489276667901467771423780,
    0.381830050505118944950369775488975, 0.417959183673469387755102040816327};

struct Piece {
  double a, b, value, error;
  bool operator<(const Piece& o) const { return error < o.error; }
};

inline Piece gauss_kronrod(const std::function<double(double)>& f, double a, double b) {
  const double c = 0.5 * (a + b);
  const double half = 0.5 * (b - a);
  const double fc = f(c);
  double kronrod = fc * kWgk[7];
  double gauss = fc * kWg[3];
  for (int j = 0; j < 7; ++j) {
    const double dx = half * kXgk[j];
    const double fsum = f(c - dx) + f(c + dx);
    kronrod += kWgk[j] * fsum;
    if (j % 2 == 1) gauss += kWg[j / 2] * fsum;
  }
  return {a, b, kronrod * half, std::abs((kronrod - gauss) * half)};
}

}  // namespace detail

/// Globally adaptive Gauss-Kronrod over consecutive breakpoints. Refines the
/// worst piece until the summed error estimate falls below rel_tol times the
/// magnitude of the integral.
inline double adaptive_integrate(const std::function<double(double)>& f,
                                 const std::vector<double>& breaks, double rel_tol = 1e-12,
                                 int max_pieces = 4000) {
  std::priority_queue<detail::Piece> heap;
  double total = 0.0;
  double abs_total = 0.0;
  double err = 0.0;
  for (std::size_t i = 0; i + 1 < breaks.size(); ++i) {
    if (!(breaks[i + 1] > breaks[i])) continue;
    const auto piece = detail::gauss_kronrod(f, breaks[i], breaks[i + 1]);
    total += piece.value;
    abs_total += std::abs(piece.value);
    err += piece.error;
    heap.push(piece);
  }
  int count = static_cast<int>(heap.size());
  while (!heap.empty() && err > rel_tol * abs_total && count < max_pieces) {
    const auto worst = heap.top();
    heap.pop();
    const double mid = 0.5 * (worst.a + worst.b);
    if (!(mid > worst.a && mid < worst.b)) break;
    const auto left = detail::gauss_kronrod(f, worst.a, mid);
    const auto right = detail::gauss_kronrod(f, mid, worst.b);
    total += left.value + right.value - worst.value;
    abs_total += std::abs(left.value) + std::abs(right.value) - std::abs(worst.value);
    err += left.error + right.error - worst.error;
    heap.push(left);
    heap.push(right);
    count += 1;
  }
  return total;
}

/// Breakpoints radiating from the mode at geometric multiples of the local
/// width, truncated once the kernel has dropped below exp(-750) of its peak.
inline std::vector<double> peak_breakpoints(const LogKernel& h, double s, double t, double mode,
                                            double h_max) {
  double width = 1.0 / std::sqrt(std::max(-h.curvature(mode), 1e-300));
  const double g = std::abs(h.slope(mode));
  if ((mode == s || mode == t) && g > 0.0) width = std::min(width, 1.0 / g);
  width = std::min(width, t - s);

  constexpr double kDrop = -750.0;
  std::vector<double> left{mode};
  for (double step = width; left.back() > s; step *= 2.0) {
    const double x = std::max(s, mode - step);
    left.push_back(x);
    if (h.value(x) - h_max < kDrop) break;
  }
  std::vector<double> right{mode};
  for (double step = width; right.back() < t; step *= 2.0) {
    const double x = std::min(t, mode + step);
    right.push_back(x);
    if (h.value(x) - h_max < kDrop) break;
  }
  std::vector<double> breaks(left.rbegin(), left.rend());
  breaks.insert(breaks.end(), right.begin() + 1, right.end());
  return breaks;
}

/// Mode-centred integral of f(x) exp(h(x) - h_max); returns {h_max, integral}.
struct ScaledIntegral {
  double log_scale;
  double value;
};

inline ScaledIntegral integrate_kernel(const LogKernel& h, double s, double t,
                                       const std::function<double(double)>& weight = nullptr) {
  const double mode = locate_mode(h, s, t);
  const double h_max = h.value(mode);
  const auto breaks = peak_breakpoints(h, s, t, mode, h_max);
  std::function<double(double)> f;
  if (weight) {
    f = [&](double x) { return weight(x) * std::exp(h.value(x) - h_max); };
  } else {
    f = [&](double x) { return std::exp(h.value(x) - h_max); };
  }
  return {h_max, adaptive_integrate(f, breaks)};
}

}  // namespace quad

/// log H(p, q, r, s, t); -inf for an empty interval.
inline double log_H(const HArgs& args) {
  quad::validate(args);
  if (args.s == args.t) return special::kNegInf;
  const quad::LogKernel h{args.p, args.q, args.r};
  const auto res = quad::integrate_kernel(h, args.s, args.t);
  return res.log_scale + std::log(res.value);
}

/// log{H(0, q, r, s, t) / (t - s)}: the log of the average kernel, which has
/// the point-mass limit h(s) as t -> s.
inline double log_H_average(const HArgs& args) {
  quad::validate(args);
  const quad::LogKernel h{args.p, args.q, args.r};
  if (args.t - args.s <= 1e-12 * args.s) return h.value(0.5 * (args.s + args.t));
  return log_H(args) - std::log(args.t - args.s);
}

/// q-density of the Negative Binomial shape parameter,
/// q(kappa) propto exp(n {kappa log kappa - lgamma kappa} - C1 kappa) on [lo, hi].
class KappaPosterior {
 public:
  KappaPosterior(double n, double C1, double kappa_min, double kappa_max)
      : kernel_{0.0, n, C1}, lo_(kappa_min), hi_(kappa_max) {
    if (!(kappa_min < kappa_max)) throw ParameterError("kappa_min must be below kappa_max");
    quad::validate(HArgs{0.0, n, C1, kappa_min, kappa_max});
    log_norm_ = log_H(HArgs{0.0, n, C1, kappa_min, kappa_max});
  }

  double log_normalizer() const { return log_norm_; }

  double mean() const {
    const double log_h1 = log_H(HArgs{1.0, kernel_.q, kernel_.r, lo_, hi_});
    return std::clamp(std::exp(log_h1 - log_norm_), lo_, hi_);
  }

  double log_pdf(double kappa) const {
    if (kappa < lo_ || kappa > hi_) return special::kNegInf;
    return kernel_.value(kappa) - log_norm_;
  }

  /// E_q[f(kappa)].
  double expect(const std::function<double(double)>& f) const {
    const auto num = quad::integrate_kernel(kernel_, lo_, hi_, f);
    const auto den = quad::integrate_kernel(kernel_, lo_, hi_);
    return num.value / den.value;
  }

  /// Mode of the density (root of n(log k + 1 - digamma k) = C1 when interior).
  double mode() const { return quad::locate_mode(kernel_, lo_, hi_); }

  double lo() const { return lo_; }
  double hi() const { return hi_; }

 private:
  quad::LogKernel kernel_;
  double lo_;
  double hi_;
  double log_norm_ = 0.0;
};

/// exp{log H(1, n, C1, lo, hi) - log H(0, n, C1, lo, hi)}, kept inside [lo, hi].
inline double kappa_posterior_mean(double n, double C1, double kappa_min, double kappa_max) {
  return KappaPosterior(n, C1, kappa_min, kappa_max).mean();
}

}  // namespace countvb
