#pragma once

// Synthetic count data for benchmarking and the streaming demo.
//
//   g1(x) = cos(4 pi x) + 2x
//   g2(x) = 0.4 phi(x; 0.38, 0.08) - 1.02x + 0.018x^2 + 0.08 phi(x; 0.75, 0.03)
//   mu(x1, x2) = exp{g1(x1) + g2(x2)},   x1, x2 ~ Uniform(0, 1)

#include <cmath>
#include <cstdint>
#include <vector>

#include <Eigen/Dense>

#include "countvb/distributions.hpp"
#include "countvb/model.hpp"
#include "countvb/special.hpp"

namespace countvb::sim {

inline constexpr double kNegBinShape = 3.8;

inline double g1(double x) { return std::cos(4.0 * special::kPi * x) + 2.0 * x; }

inline double g2(double x) {
  return 0.4 * special::normal_pdf(x, 0.38, 0.08) - 1.02 * x + 0.018 * x * x +
         0.08 * special::normal_pdf(x, 0.75, 0.03);
}

inline double true_mean(double x1, double x2) { return std::exp(g1(x1) + g2(x2)); }

struct Dataset {
  std::vector<double> y;
  std::vector<double> x1;
  std::vector<double> x2;  // empty for the one-predictor demo

  Eigen::VectorXd response() const {
    return Eigen::Map<const Eigen::VectorXd>(y.data(), static_cast<Eigen::Index>(y.size()));
  }
};

/// Two-predictor additive design: all x1 first, then all x2, then responses.
inline Dataset additive(std::uint64_t seed, Family family, std::size_t n) {
  Rng rng(seed);
  Dataset d;
  d.x1.resize(n);
  d.x2.resize(n);
  d.y.resize(n);
  const dist::Uniform unit{0.0, 1.0};
  for (auto& x : d.x1) x = dist::sample(unit, rng);
  for (auto& x : d.x2) x = dist::sample(unit, rng);
  for (std::size_t i = 0; i < n; ++i) {
    const double mu = true_mean(d.x1[i], d.x2[i]);
    d.y[i] = family == Family::Poisson
                 ? static_cast<double>(dist::sample(dist::Poisson{mu}, rng))
                 : static_cast<double>(dist::sample_negbin_poisson_gamma(mu, kNegBinShape, rng));
  }
  return d;
}

/// One-predictor Poisson stream: x ~ Uniform(0, 1), y ~ Poisson(exp g1(x)).
/// Draws are interleaved per record so any prefix is a valid stream.
inline Dataset stream_demo(std::uint64_t seed, std::size_t n) {
  Rng rng(seed);
  Dataset d;
  d.x1.resize(n);
  d.y.resize(n);
  const dist::Uniform unit{0.0, 1.0};
  for (std::size_t i = 0; i < n; ++i) {
    d.x1[i] = dist::sample(unit, rng);
    d.y[i] = static_cast<double>(dist::sample(dist::Poisson{std::exp(g1(d.x1[i]))}, rng));
  }
  return d;
}

}  // namespace countvb::sim
