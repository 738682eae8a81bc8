#pragma once

// Densities, probability mass functions and samplers for the distribution
// families used by the count regression models, plus the two auxiliary
// variable constructions the variational algorithms rely on:
//
//   * Poisson-Gamma mixture: x | a ~ Poisson(a), a ~ Gamma(kappa, kappa/mu)
//     gives x ~ Negative-Binomial(mu, kappa).
//   * Nested Inverse-Gamma: x | a ~ Inverse-Gamma(1/2, 1/a),
//     a ~ Inverse-Gamma(1/2, 1/A^2) gives sqrt(x) ~ Half-Cauchy(A).
//
// The Negative Binomial pmf is the standard mean/shape form
//
//   Gamma(x + kappa) / (Gamma(kappa) x!) (kappa/(kappa+mu))^kappa (mu/(kappa+mu))^x
//
// which is the marginal of the Poisson-Gamma mixture above. A printing that
// drops the exponent on the (kappa + mu) denominator is not a normalized pmf
// and disagrees with the mixture identity, so it is not used.
//
// Everything is evaluated in the log domain.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <type_traits>
#include <variant>

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include "countvb/errors.hpp"
#include "countvb/special.hpp"

namespace countvb {

using Rng = std::mt19937_64;

namespace dist {

struct Poisson {
  double lambda;
};

struct NegativeBinomial {
  double mu;
  double kappa;
};

struct Uniform {
  double a;
  double b;
};

struct MultivariateNormal {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

/// Shape/rate parameterization: density B^A x^(A-1) exp(-B x) / Gamma(A).
struct Gamma {
  double shape;
  double rate;
};

/// Density B^A x^(-A-1) exp(-B/x) / Gamma(A).
struct InverseGamma {
  double shape;
  double rate;
};

struct HalfCauchy {
  double scale;
};

using DistSpec = std::variant<Poisson, NegativeBinomial, Uniform, MultivariateNormal,
                              Gamma, InverseGamma, HalfCauchy>;

/// A drawn value: counts, reals, or vectors depending on the family.
using Value = std::variant<std::int64_t, double, Eigen::VectorXd>;

namespace detail {

inline void require_positive(double v, const char* name) {
  if (!(v > 0.0) || !std::isfinite(v)) {
    throw ParameterError(std::string(name) + " must be positive and finite");
  }
}

inline void require_count(double x) {
  if (!(x >= 0.0) || x != std::floor(x)) {
    throw DomainError("count families require a nonnegative integer");
  }
}

}  // namespace detail

inline void validate(const Poisson& d) { detail::require_positive(d.lambda, "lambda"); }

inline void validate(const NegativeBinomial& d) {
  detail::require_positive(d.mu, "mu");
  detail::require_positive(d.kappa, "kappa");
}

inline void validate(const Uniform& d) {
  if (!(d.a < d.b) || !std::isfinite(d.a) || !std::isfinite(d.b)) {
    throw ParameterError("Uniform requires finite a < b");
  }
}

inline void validate(const MultivariateNormal& d) {
  if (d.cov.rows() != d.cov.cols() || d.cov.rows() != d.mean.size()) {
    throw ParameterError("MultivariateNormal dimension mismatch");
  }
  if (!d.cov.isApprox(d.cov.transpose(), 1e-12)) {
    throw ParameterError("MultivariateNormal covariance must be symmetric");
  }
  Eigen::LLT<Eigen::MatrixXd> llt(d.cov);
  if (llt.info() != Eigen::Success) {
    throw ParameterError("MultivariateNormal covariance must be positive definite");
  }
}

inline void validate(const Gamma& d) {
  detail::require_positive(d.shape, "shape");
  detail::require_positive(d.rate, "rate");
}

inline void validate(const InverseGamma& d) {
  detail::require_positive(d.shape, "shape");
  detail::require_positive(d.rate, "rate");
}

inline void validate(const HalfCauchy& d) { detail::require_positive(d.scale, "scale"); }

inline void validate(const DistSpec& spec) {
  std::visit([](const auto& d) { validate(d); }, spec);
}

// ---------------------------------------------------------------------------
// log densities

inline double log_prob(const Poisson& d, double x) {
  validate(d);
  detail::require_count(x);
  return x * std::log(d.lambda) - d.lambda - special::log_factorial(x);
}

inline double log_prob(const NegativeBinomial& d, double x) {
  validate(d);
  detail::require_count(x);
  const double log_denom = std::log(d.kappa + d.mu);
  return special::lgamma(x + d.kappa) - special::lgamma(d.kappa) - special::log_factorial(x) +
         d.kappa * (std::log(d.kappa) - log_denom) + x * (std::log(d.mu) - log_denom);
}

inline double log_prob(const Uniform& d, double x) {
  validate(d);
  if (!(x > d.a && x < d.b)) throw DomainError("Uniform argument outside (a, b)");
  return -std::log(d.b - d.a);
}

inline double log_prob(const Gamma& d, double x) {
  validate(d);
  if (!(x > 0.0)) throw DomainError("Gamma argument must be positive");
  return d.shape * std::log(d.rate) + (d.shape - 1.0) * std::log(x) - d.rate * x -
         special::lgamma(d.shape);
}

inline double log_prob(const InverseGamma& d, double x) {
  validate(d);
  if (!(x > 0.0)) throw DomainError("Inverse-Gamma argument must be positive");
  return d.shape * std::log(d.rate) - (d.shape + 1.0) * std::log(x) - d.rate / x -
         special::lgamma(d.shape);
}

inline double log_prob(const HalfCauchy& d, double x) {
  validate(d);
  if (!(x > 0.0)) throw DomainError("Half-Cauchy argument must be positive");
  return std::log(2.0 * d.scale / special::kPi) - std::log(x * x + d.scale * d.scale);
}

inline double log_prob(const MultivariateNormal& d, const Eigen::VectorXd& x) {
  validate(d);
  if (x.size() != d.mean.size()) throw DomainError("MultivariateNormal argument dimension");
  Eigen::LLT<Eigen::MatrixXd> llt(d.cov);
  const Eigen::VectorXd z = llt.matrixL().solve(x - d.mean);
  const double log_det = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
  return -0.5 * z.squaredNorm() - 0.5 * log_det -
         static_cast<double>(x.size()) * special::kLogSqrt2Pi;
}

/// Scalar families only; a MultivariateNormal spec here is a domain error.
inline double log_prob(const DistSpec& spec, double x) {
  return std::visit(
      [x](const auto& d) -> double {
        using T = std::decay_t<decltype(d)>;
        if constexpr (std::is_same_v<T, MultivariateNormal>) {
          if (d.mean.size() != 1) throw DomainError("vector-valued family needs a vector argument");
          return log_prob(d, Eigen::VectorXd::Constant(1, x));
        } else {
          return log_prob(d, x);
        }
      },
      spec);
}

inline double log_prob(const DistSpec& spec, const Eigen::VectorXd& x) {
  if (const auto* mvn = std::get_if<MultivariateNormal>(&spec)) return log_prob(*mvn, x);
  if (x.size() != 1) throw DomainError("scalar family needs a scalar argument");
  return log_prob(spec, x(0));
}

// ---------------------------------------------------------------------------
// samplers

inline double sample(const Gamma& d, Rng& rng) {
  validate(d);
  return std::gamma_distribution<double>(d.shape, 1.0 / d.rate)(rng);
}

inline double sample(const InverseGamma& d, Rng& rng) {
  validate(d);
  return 1.0 / std::gamma_distribution<double>(d.shape, 1.0 / d.rate)(rng);
}

inline std::int64_t sample(const Poisson& d, Rng& rng) {
  validate(d);
  return std::poisson_distribution<std::int64_t>(d.lambda)(rng);
}

inline double sample(const Uniform& d, Rng& rng) {
  validate(d);
  // uniform_real_distribution is [a, b); redraw the closed endpoint
  std::uniform_real_distribution<double> u(d.a, d.b);
  double x = u(rng);
  while (x <= d.a) x = u(rng);
  return x;
}

inline Eigen::VectorXd sample(const MultivariateNormal& d, Rng& rng) {
  validate(d);
  Eigen::LLT<Eigen::MatrixXd> llt(d.cov);
  std::normal_distribution<double> z;
  Eigen::VectorXd e(d.mean.size());
  for (Eigen::Index i = 0; i < e.size(); ++i) e(i) = z(rng);
  return d.mean + llt.matrixL() * e;
}

/// Draws a ~ Gamma(kappa, kappa/mu), then x | a ~ Poisson(a).
inline std::int64_t sample_negbin_poisson_gamma(double mu, double kappa, Rng& rng) {
  validate(NegativeBinomial{mu, kappa});
  const double a = std::gamma_distribution<double>(kappa, mu / kappa)(rng);
  if (a <= 0.0) return 0;
  return std::poisson_distribution<std::int64_t>(a)(rng);
}

inline std::int64_t sample(const NegativeBinomial& d, Rng& rng) {
  return sample_negbin_poisson_gamma(d.mu, d.kappa, rng);
}

/// Draws a ~ Inverse-Gamma(1/2, 1/A^2), then x | a ~ Inverse-Gamma(1/2, 1/a);
/// returns sqrt(x).
inline double sample_halfcauchy_ig(double scale, Rng& rng) {
  detail::require_positive(scale, "A");
  const double a = sample(InverseGamma{0.5, 1.0 / (scale * scale)}, rng);
  const double x = sample(InverseGamma{0.5, 1.0 / a}, rng);
  return std::sqrt(x);
}

/// Inverse-CDF draw, used to cross-check the composed sampler.
inline double sample_halfcauchy_inverse_cdf(double scale, Rng& rng) {
  detail::require_positive(scale, "A");
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double v = u(rng);
  while (v <= 0.0) v = u(rng);
  return scale * std::tan(0.5 * special::kPi * v);
}

inline double sample(const HalfCauchy& d, Rng& rng) { return sample_halfcauchy_ig(d.scale, rng); }

inline Value sample(const DistSpec& spec, Rng& rng) {
  return std::visit([&rng](const auto& d) -> Value { return sample(d, rng); }, spec);
}

inline double halfcauchy_cdf(double x, double scale) {
  return x <= 0.0 ? 0.0 : 2.0 / special::kPi * std::atan(x / scale);
}

}  // namespace dist
}  // namespace countvb
