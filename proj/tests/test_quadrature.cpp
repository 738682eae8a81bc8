#include <cmath>
#include <limits>
#include <random>

#include <gtest/gtest.h>

#include "countvb/quadrature.hpp"
#include "test_support.hpp"

using namespace countvb;

namespace {

double relative(double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1e-300); }

// r placing the mode of the log integrand at m.
double rate_for_mode(double p, double q, double m) {
  return p / m + q * (std::log(m) + 1.0 - special::digamma(m));
}

}  // namespace

TEST(LogH, EmptyIntervalIsMinusInfinity) {
  EXPECT_EQ(log_H({0.0, 5.0, 5.0, 2.0, 2.0}), -std::numeric_limits<double>::infinity());
}

TEST(LogH, ReversedIntervalIsDomainError) {
  EXPECT_THROW(log_H({0.0, 5.0, 5.0, 3.0, 2.0}), DomainError);
  EXPECT_THROW(log_H({-1.0, 5.0, 5.0, 1.0, 2.0}), ParameterError);
  EXPECT_THROW(log_H({0.0, 0.0, 5.0, 1.0, 2.0}), ParameterError);
}

TEST(LogH, HugeRateConcentratesMassAtLeftEndpoint) {
  const double lib = log_H({0.0, 1.0, 1e6, 0.01, 100.0});
  const double ref = oracle::log_H_trapezoid(0.0, 1.0, 1e6, 0.01, 100.0);
  EXPECT_LT(relative(std::exp(lib - ref), 1.0), 1e-6);
}

TEST(LogH, ModerateArgumentsMatchTrapezoidOracle) {
  const double h0 = log_H({0.0, 5.0, 5.0, 0.01, 100.0});
  const double h1 = log_H({1.0, 5.0, 5.0, 0.01, 100.0});
  EXPECT_LT(std::abs(std::exp(h0 - oracle::log_H_trapezoid(0.0, 5.0, 5.0, 0.01, 100.0)) - 1.0), 1e-8);
  EXPECT_LT(std::abs(std::exp(h1 - oracle::log_H_trapezoid(1.0, 5.0, 5.0, 0.01, 100.0)) - 1.0), 1e-8);
  const double ratio = std::exp(h1 - h0);
  EXPECT_GE(ratio, 0.01);
  EXPECT_LE(ratio, 100.0);
}

TEST(LogH, RandomizedArgumentsMatchTrapezoidOracle) {
  std::mt19937_64 rng(77);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int i = 0; i < 50; ++i) {
    const double q = std::exp(std::log(1000.0) * unit(rng));
    const double m = std::exp(std::log(0.3) + (std::log(30.0) - std::log(0.3)) * unit(rng));
    const double p = (i % 2) ? 1.0 : 0.0;
    const double r = rate_for_mode(p, q, m);
    const double s = 0.01, t = 100.0;
    const double lib = log_H({p, q, r, s, t});
    const double ref = oracle::log_H_trapezoid(p, q, r, s, t);
    EXPECT_LT(std::abs(std::exp(lib - ref) - 1.0), 1e-6) << "q=" << q << " r=" << r << " p=" << p;
  }
}

TEST(LogH, MonotoneInRateAndUpperLimit) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int i = 0; i < 40; ++i) {
    const double q = 1.0 + 200.0 * unit(rng);
    const double r = rate_for_mode(0.0, q, 0.5 + 10.0 * unit(rng));
    const double t = 2.0 + 50.0 * unit(rng);
    const HArgs base{unit(rng) < 0.5 ? 0.0 : 1.0, q, r, 0.05, t};
    HArgs more_r = base;
    more_r.r += 0.1 + unit(rng);
    HArgs more_t = base;
    more_t.t += 0.1 + 5.0 * unit(rng);
    // extra mass far in the tail can be below the quadrature's rounding level
    const double slack = 1e-12 * (1.0 + std::abs(log_H(base)));
    EXPECT_LE(log_H(more_r), log_H(base) + slack);
    EXPECT_GE(log_H(more_t), log_H(base) - slack);
  }
}

TEST(KappaMean, AlwaysInsideSupport) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int i = 0; i < 100; ++i) {
    const double n = 1.0 + 5000.0 * unit(rng);
    const double C1 = n * (-2.0 + 8.0 * unit(rng));
    const double k = kappa_posterior_mean(n, C1, 0.01, 100.0);
    EXPECT_GE(k, 0.01);
    EXPECT_LE(k, 100.0);
  }
}

TEST(KappaMean, ModeAtThreePointEightGivesMeanNearby) {
  const double n = 500.0, kappa = 3.8;
  const double C1 = n * (std::log(kappa) + 1.0 - special::digamma(kappa));
  const double mean = kappa_posterior_mean(n, C1, 0.01, 100.0);
  const double ref = std::exp(oracle::log_H_trapezoid(1.0, n, C1, 0.01, 100.0) -
                              oracle::log_H_trapezoid(0.0, n, C1, 0.01, 100.0));
  EXPECT_NEAR(mean, ref, 1e-7 * ref);
  EXPECT_NEAR(mean, 3.8, 0.05);
  const KappaPosterior qk(n, C1, 0.01, 100.0);
  EXPECT_NEAR(qk.mode(), 3.8, 1e-9);
}

TEST(KappaMean, DegenerateIntervalReturnsItsLeftEnd) {
  const double lo = 2.0, eps = 1e-6;
  const double mean = kappa_posterior_mean(500.0, 700.0, lo, lo + eps);
  EXPECT_GE(mean, lo);
  EXPECT_LE(mean - lo, eps);
}

TEST(KappaMean, LargeSampleSizesStayFinite) {
  for (double n : {1e3, 1e4, 1e5}) {
    for (double kappa : {0.05, 1.0, 3.8, 60.0}) {
      const double C1 = n * (std::log(kappa) + 1.0 - special::digamma(kappa));
      const double h0 = log_H({0.0, n, C1, 0.01, 100.0});
      EXPECT_TRUE(std::isfinite(h0));
      const double mean = kappa_posterior_mean(n, C1, 0.01, 100.0);
      EXPECT_NEAR(mean, kappa, 0.02 * kappa + 1e-3) << "n=" << n;
    }
  }
}

TEST(KappaMean, ExpectationsAgreeWithTrapezoid) {
  const double n = 40.0, kappa = 2.0;
  const double C1 = n * (std::log(kappa) + 1.0 - special::digamma(kappa));
  const KappaPosterior qk(n, C1, 0.01, 100.0);
  // E[kappa^2] = H(2, ...) / H(0, ...)
  const double e2 = qk.expect([](double k) { return k * k; });
  const double ref = std::exp(oracle::log_H_trapezoid(2.0, n, C1, 0.01, 100.0) -
                              oracle::log_H_trapezoid(0.0, n, C1, 0.01, 100.0));
  EXPECT_NEAR(e2, ref, 1e-7 * ref);
}
