#pragma once

// Markov chain Monte Carlo reference fits and the density accuracy score.
//
// Sampler, one sweep:
//   (beta, u)  random-walk Metropolis, one block for beta and one per u_l;
//              proposals N(0, s_b^2 H_b^-1) with H_b the block's conditional
//              precision, refreshed along with s_b during burn-in only
//   a_l        ~ IG(1, 1/sigma_l^2 + 1/A_l^2)
//   sigma_l^2  ~ IG((K_l + 1)/2, 1/a_l + |u_l|^2 / 2)
//   kappa      random-walk Metropolis on log kappa inside [kappa_min, kappa_max]
//   g_i        ~ Gamma(kappa + y_i, 1 + kappa exp(-eta_i))
// For the Negative Binomial family the Metropolis steps for (beta, u) and
// kappa target the likelihood with g integrated out, so the g draws do not
// feed back into them; the joint stationary law is unchanged.
//
// Accuracy: 100 (1 - 0.5 * integral |q - p|), with p a Gaussian kernel
// density estimate of the draws (Silverman bandwidth), integrated by the
// trapezoid rule on 4096 points per connected piece of the union of both
// densities' 0.1%..99.9% ranges.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <boost/math/distributions/inverse_gamma.hpp>
#include <boost/math/distributions/normal.hpp>

#include "countvb/csv.hpp"
#include "countvb/distributions.hpp"
#include "countvb/errors.hpp"
#include "countvb/model.hpp"
#include "countvb/quadrature.hpp"
#include "countvb/special.hpp"
#include "countvb/vmp_core.hpp"

namespace countvb {

struct ChainConfig {
  std::size_t burn_in = 20000;
  std::size_t kept = 5000;
  std::size_t thin = 20;
  double proposal_scale = 1.0;  // initial multiplier on 2.38 / sqrt(block size)
  std::uint64_t seed = 1;
  double target_accept = 0.35;
  std::size_t adapt_every = 100;
  bool freeze_theta = false;  // hold (beta, u) at its start value

  void validate() const {
    if (kept < 100) throw ParameterError("need at least 100 kept draws");
    if (thin < 1) throw ParameterError("thinning factor must be at least 1");
    if (!(proposal_scale > 0.0)) throw ParameterError("proposal scale must be positive");
    if (adapt_every < 1) throw ParameterError("adaptation window must be positive");
  }
};

struct PosteriorSamples {
  Eigen::MatrixXd theta;   // kept x P, rows are draws of (beta, u)
  Eigen::MatrixXd sigma2;  // kept x r
  Eigen::MatrixXd a;       // kept x r
  Eigen::VectorXd kappa;   // kept (Negative Binomial only, else empty)
  std::vector<double> acceptance;  // post burn-in, per theta block then kappa
  bool acceptance_warning = false;  // some rate outside [0.1, 0.6]

  /// Draws of c^T (beta, u) for each design row: kept x rows.
  Eigen::MatrixXd linear_predictor(const Eigen::MatrixXd& rows) const { return theta * rows.transpose(); }
};

namespace mcmc {

/// Log-likelihood pieces and block curvature for either family; kappa is
/// ignored for Poisson.
struct Likelihood {
  const Problem* prob;
  std::vector<std::pair<double, double>> y_counts;  // (distinct y, multiplicity)

  explicit Likelihood(const Problem* p) : prob(p) {
    std::vector<double> ys(p->y.data(), p->y.data() + p->y.size());
    std::sort(ys.begin(), ys.end());
    for (double v : ys) {
      if (y_counts.empty() || y_counts.back().first != v) y_counts.emplace_back(v, 0.0);
      y_counts.back().second += 1.0;
    }
  }

  double value(const Eigen::VectorXd& eta, double kappa) const {
    const auto& y = prob->y;
    double v = 0.0;
    if (prob->family == Family::Poisson) {
      for (Eigen::Index i = 0; i < y.size(); ++i) v += y(i) * eta(i) - std::exp(eta(i));
      return v;
    }
    const double log_kappa = std::log(kappa);
    for (Eigen::Index i = 0; i < y.size(); ++i) {
      v += y(i) * eta(i) - (kappa + y(i)) * special::log_add_exp(log_kappa, eta(i));
    }
    return v;
  }

  /// Full kappa-dependent log-likelihood (g integrated out).
  double kappa_value(const Eigen::VectorXd& eta, double kappa) const {
    const auto& y = prob->y;
    const double n = static_cast<double>(y.size());
    const double log_kappa = std::log(kappa);
    double v = n * (kappa * log_kappa - special::lgamma(kappa));
    for (const auto& [value, count] : y_counts) v += count * special::lgamma(kappa + value);
    for (Eigen::Index i = 0; i < y.size(); ++i) {
      v -= (kappa + y(i)) * special::log_add_exp(log_kappa, eta(i));
    }
    return v;
  }

  /// Negative second derivative of the log-likelihood in eta_i.
  Eigen::VectorXd curvature(const Eigen::VectorXd& eta, double kappa) const {
    if (prob->family == Family::Poisson) return eta.array().exp();
    Eigen::VectorXd c(eta.size());
    for (Eigen::Index i = 0; i < eta.size(); ++i) {
      const double mu = std::exp(eta(i));
      c(i) = (kappa + prob->y(i)) * kappa * mu / ((kappa + mu) * (kappa + mu));
    }
    return c;
  }
};

struct Block {
  Eigen::Index offset = 0;
  Eigen::Index size = 0;
  double scale = 1.0;
  Eigen::MatrixXd chol;  // lower factor of the proposal covariance before scaling
  std::size_t proposed = 0;
  std::size_t accepted = 0;
};

}  // namespace mcmc

inline PosteriorSamples mcmc_fit(const Problem& prob, const ChainConfig& chain) {
  chain.validate();
  Rng rng(chain.seed);
  std::normal_distribution<double> std_normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const mcmc::Likelihood lik(&prob);
  const bool negbin = prob.family == Family::NegativeBinomial;
  const std::size_t r = prob.r();
  const auto& hyper = prob.hyper;

  // start: penalized mode with unit spline variances
  std::vector<double> sigma2(r, 1.0);
  std::vector<double> a(r, 1.0);
  auto precision = [&] {
    Eigen::VectorXd m(prob.P());
    m.head(prob.p).setConstant(1.0 / (hyper.sigma_beta * hyper.sigma_beta));
    for (std::size_t l = 0; l < r; ++l) {
      const auto b = prob.block(l);
      m.segment(b.offset, b.size).setConstant(1.0 / sigma2[l]);
    }
    return m;
  };
  Eigen::VectorXd theta = penalized_poisson_mode(prob, precision());
  Eigen::VectorXd eta = prob.C * theta;
  double kappa = negbin ? std::clamp(5.0, hyper.kappa_min, hyper.kappa_max) : 1.0;
  Eigen::VectorXd g = Eigen::VectorXd::Zero(negbin ? prob.n() : 0);

  std::vector<mcmc::Block> blocks(r + 1);
  blocks[0].size = prob.p;
  for (std::size_t l = 0; l < r; ++l) {
    blocks[l + 1].offset = prob.block(l).offset;
    blocks[l + 1].size = prob.block(l).size;
  }
  for (auto& b : blocks) b.scale = chain.proposal_scale * 2.38 / std::sqrt(static_cast<double>(b.size));
  double kappa_step = 0.1;
  std::size_t kappa_proposed = 0;
  std::size_t kappa_accepted = 0;

  auto refresh_proposals = [&] {
    const Eigen::VectorXd weight = lik.curvature(eta, kappa);
    const Eigen::VectorXd m = precision();
    for (auto& b : blocks) {
      const auto Cb = prob.C.middleCols(b.offset, b.size);
      Eigen::MatrixXd H = Cb.transpose() * weight.asDiagonal() * Cb;
      H.diagonal() += m.segment(b.offset, b.size);
      const Eigen::MatrixXd cov = H.llt().solve(Eigen::MatrixXd::Identity(b.size, b.size));
      Eigen::LLT<Eigen::MatrixXd> llt(cov);
      if (llt.info() == Eigen::Success) b.chol = llt.matrixL();
    }
  };
  refresh_proposals();

  auto log_prior_block = [&](const mcmc::Block& b, const Eigen::VectorXd& th) {
    const Eigen::VectorXd m = precision().segment(b.offset, b.size);
    return -0.5 * m.dot(th.segment(b.offset, b.size).cwiseAbs2());
  };

  PosteriorSamples out;
  out.theta.resize(static_cast<Eigen::Index>(chain.kept), prob.P());
  out.sigma2.resize(static_cast<Eigen::Index>(chain.kept), static_cast<Eigen::Index>(r));
  out.a.resize(static_cast<Eigen::Index>(chain.kept), static_cast<Eigen::Index>(r));
  if (negbin) out.kappa.resize(static_cast<Eigen::Index>(chain.kept));

  const std::size_t total = chain.burn_in + chain.kept * chain.thin;
  double current_lik = lik.value(eta, kappa);
  std::size_t window_start = 0;
  std::vector<std::size_t> window_acc(blocks.size() + 1, 0);
  std::vector<std::size_t> window_prop(blocks.size() + 1, 0);
  std::size_t stored = 0;

  for (std::size_t it = 0; it < total; ++it) {
    const bool burning = it < chain.burn_in;
    if (it == chain.burn_in) {
      for (auto& b : blocks) b.proposed = b.accepted = 0;
      kappa_proposed = kappa_accepted = 0;
    }

    if (!chain.freeze_theta) {
      for (std::size_t bi = 0; bi < blocks.size(); ++bi) {
        auto& b = blocks[bi];
        if (b.size == 0) continue;
        Eigen::VectorXd z(b.size);
        for (Eigen::Index j = 0; j < b.size; ++j) z(j) = std_normal(rng);
        const Eigen::VectorXd step = b.scale * (b.chol * z);
        Eigen::VectorXd proposal = theta;
        proposal.segment(b.offset, b.size) += step;
        const Eigen::VectorXd eta_new = eta + prob.C.middleCols(b.offset, b.size) * step;
        const double lik_new = lik.value(eta_new, kappa);
        const double log_ratio =
            lik_new - current_lik + log_prior_block(b, proposal) - log_prior_block(b, theta);
        b.proposed += 1;
        window_prop[bi] += 1;
        if (std::isfinite(lik_new) && std::log(unif(rng)) < log_ratio) {
          theta = std::move(proposal);
          eta = eta_new;
          current_lik = lik_new;
          b.accepted += 1;
          window_acc[bi] += 1;
        }
      }
    }

    for (std::size_t l = 0; l < r; ++l) {
      const auto rb = prob.block(l);
      const double A = hyper.A[l];
      a[l] = dist::sample(dist::InverseGamma{1.0, 1.0 / sigma2[l] + 1.0 / (A * A)}, rng);
      const double ss = theta.segment(rb.offset, rb.size).squaredNorm();
      sigma2[l] = dist::sample(dist::InverseGamma{0.5 * (rb.size + 1.0), 1.0 / a[l] + 0.5 * ss}, rng);
    }

    if (negbin) {
      const double t = std::log(kappa) + kappa_step * std_normal(rng);
      const double k_new = std::exp(t);
      kappa_proposed += 1;
      window_prop.back() += 1;
      if (k_new > hyper.kappa_min && k_new < hyper.kappa_max) {
        const double kappa_lik_new = lik.kappa_value(eta, k_new);
        const double log_ratio = kappa_lik_new + t - lik.kappa_value(eta, kappa) - std::log(kappa);
        if (std::log(unif(rng)) < log_ratio) {
          kappa = k_new;
          current_lik = lik.value(eta, kappa);
          kappa_accepted += 1;
          window_acc.back() += 1;
        }
      }
      for (Eigen::Index i = 0; i < prob.n(); ++i) {
        const double rate = 1.0 + kappa * std::exp(-eta(i));
        g(i) = dist::sample(dist::Gamma{kappa + prob.y(i), rate}, rng);
      }
    }

    if (burning && it + 1 - window_start >= chain.adapt_every) {
      for (std::size_t bi = 0; bi < blocks.size(); ++bi) {
        if (window_prop[bi] == 0) continue;
        const double rate = static_cast<double>(window_acc[bi]) / static_cast<double>(window_prop[bi]);
        blocks[bi].scale *= std::exp(rate - chain.target_accept);
      }
      if (negbin && window_prop.back() > 0) {
        const double rate = static_cast<double>(window_acc.back()) / static_cast<double>(window_prop.back());
        kappa_step *= std::exp(rate - chain.target_accept);
      }
      refresh_proposals();
      std::fill(window_acc.begin(), window_acc.end(), 0);
      std::fill(window_prop.begin(), window_prop.end(), 0);
      window_start = it + 1;
    }

    if (!burning && (it - chain.burn_in + 1) % chain.thin == 0) {
      const auto row = static_cast<Eigen::Index>(stored);
      out.theta.row(row) = theta.transpose();
      for (std::size_t l = 0; l < r; ++l) {
        out.sigma2(row, static_cast<Eigen::Index>(l)) = sigma2[l];
        out.a(row, static_cast<Eigen::Index>(l)) = a[l];
      }
      if (negbin) out.kappa(row) = kappa;
      stored += 1;
    }
  }

  auto rate = [](std::size_t acc, std::size_t prop) {
    return prop == 0 ? std::numeric_limits<double>::quiet_NaN()
                     : static_cast<double>(acc) / static_cast<double>(prop);
  };
  if (!chain.freeze_theta) {
    for (const auto& b : blocks) out.acceptance.push_back(rate(b.accepted, b.proposed));
  }
  if (negbin) out.acceptance.push_back(rate(kappa_accepted, kappa_proposed));
  for (double v : out.acceptance) {
    if (std::isfinite(v) && (v < 0.1 || v > 0.6)) out.acceptance_warning = true;
  }
  return out;
}

inline PosteriorSamples mcmc_fit(Family family, const DesignBlocks& design, const Eigen::VectorXd& y,
                                 const Hyperparameters& hyper, const ChainConfig& chain) {
  return mcmc_fit(make_problem(family, design, y, hyper), chain);
}

/// CSV with one row per kept draw: theta_1..theta_P, sigma2_1..r, a_1..r[, kappa].
inline void write_samples_csv(std::ostream& os, const PosteriorSamples& s) {
  std::vector<std::string> header;
  for (Eigen::Index j = 0; j < s.theta.cols(); ++j) header.push_back("theta_" + std::to_string(j + 1));
  for (Eigen::Index j = 0; j < s.sigma2.cols(); ++j) header.push_back("sigma2_" + std::to_string(j + 1));
  for (Eigen::Index j = 0; j < s.a.cols(); ++j) header.push_back("a_" + std::to_string(j + 1));
  if (s.kappa.size() > 0) header.push_back("kappa");
  csv::write_row(os, header);
  std::vector<double> row;
  for (Eigen::Index i = 0; i < s.theta.rows(); ++i) {
    row.clear();
    for (Eigen::Index j = 0; j < s.theta.cols(); ++j) row.push_back(s.theta(i, j));
    for (Eigen::Index j = 0; j < s.sigma2.cols(); ++j) row.push_back(s.sigma2(i, j));
    for (Eigen::Index j = 0; j < s.a.cols(); ++j) row.push_back(s.a(i, j));
    if (s.kappa.size() > 0) row.push_back(s.kappa(i));
    csv::write_row(os, row);
  }
}

// ---------------------------------------------------------------------------
// accuracy

/// A univariate density with its 0.1% and 99.9% quantiles.
struct Density {
  std::function<double(double)> pdf;
  double lo = 0.0;
  double hi = 0.0;
};

inline Density normal_density(double mean, double sd) {
  if (!(sd > 0.0)) throw ParameterError("normal density needs sd > 0");
  const boost::math::normal_distribution<double> d(mean, sd);
  return {[mean, sd](double x) { return special::normal_pdf(x, mean, sd); },
          boost::math::quantile(d, 0.001), boost::math::quantile(d, 0.999)};
}

/// Density of log X for X ~ Inverse-Gamma(shape, rate).
inline Density log_inverse_gamma_density(double shape, double rate) {
  if (!(shape > 0.0) || !(rate > 0.0)) throw ParameterError("inverse gamma needs positive parameters");
  const boost::math::inverse_gamma_distribution<double> d(shape, rate);
  const double log_norm = shape * std::log(rate) - special::lgamma(shape);
  return {[=](double t) { return std::exp(log_norm - shape * t - rate * std::exp(-t)); },
          std::log(boost::math::quantile(d, 0.001)), std::log(boost::math::quantile(d, 0.999))};
}

/// Density on [lo, hi] given by an unnormalized log density; quantiles
/// from a fine trapezoid CDF.
inline Density density_from_log_kernel(const std::function<double(double)>& log_kernel, double lo, double hi,
                                       int points = 20001) {
  if (!(lo < hi)) throw ParameterError("density support must have lo < hi");
  std::vector<double> x(static_cast<std::size_t>(points));
  std::vector<double> lv(x.size());
  double peak = special::kNegInf;
  for (std::size_t i = 0; i < x.size(); ++i) {
    x[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(points - 1);
    lv[i] = log_kernel(x[i]);
    peak = std::max(peak, lv[i]);
  }
  std::vector<double> cdf(x.size(), 0.0);
  for (std::size_t i = 1; i < x.size(); ++i) {
    cdf[i] = cdf[i - 1] + 0.5 * (std::exp(lv[i] - peak) + std::exp(lv[i - 1] - peak)) * (x[i] - x[i - 1]);
  }
  const double total = cdf.back();
  if (!(total > 0.0)) throw NumericalError("density kernel has no mass", 0);
  auto quantile = [&](double p) {
    const auto it = std::lower_bound(cdf.begin(), cdf.end(), p * total);
    const auto i = static_cast<std::size_t>(std::max<std::ptrdiff_t>(1, it - cdf.begin()));
    const double f = (p * total - cdf[i - 1]) / std::max(cdf[i] - cdf[i - 1], 1e-300);
    return x[i - 1] + std::clamp(f, 0.0, 1.0) * (x[i] - x[i - 1]);
  };
  const double log_norm = peak + std::log(total);
  return {[log_kernel, lo, hi, log_norm](double t) {
            return t < lo || t > hi ? 0.0 : std::exp(log_kernel(t) - log_norm);
          },
          quantile(0.001), quantile(0.999)};
}

/// Density of log kappa under q(kappa).
inline Density log_kappa_density(const KappaPosterior& qk) {
  return density_from_log_kernel([&qk](double t) { return qk.log_pdf(std::exp(t)) + t; }, std::log(qk.lo()),
                                 std::log(qk.hi()));
}

/// Gaussian kernel density estimate with Silverman's bandwidth.
class KernelDensity {
 public:
  explicit KernelDensity(std::span<const double> samples) : x_(samples.begin(), samples.end()) {
    if (x_.size() < 2) throw DataError("kernel density needs at least two samples");
    std::sort(x_.begin(), x_.end());
    const double n = static_cast<double>(x_.size());
    const double mean = std::accumulate(x_.begin(), x_.end(), 0.0) / n;
    double ss = 0.0;
    for (double v : x_) ss += (v - mean) * (v - mean);
    const double sd = std::sqrt(ss / (n - 1.0));
    const double iqr = sorted_quantile(0.75) - sorted_quantile(0.25);
    double spread = sd;
    if (iqr > 0.0) spread = std::min(sd, iqr / 1.34);
    if (!(spread > 0.0) || !std::isfinite(spread)) throw DataError("samples have zero variance");
    h_ = 0.9 * spread * std::pow(n, -0.2);
  }

  double bandwidth() const { return h_; }

  double pdf(double t) const {
    // kernels beyond 40 bandwidths contribute nothing representable
    const auto first = std::lower_bound(x_.begin(), x_.end(), t - 40.0 * h_);
    const auto last = std::upper_bound(x_.begin(), x_.end(), t + 40.0 * h_);
    double s = 0.0;
    for (auto it = first; it != last; ++it) {
      const double z = (t - *it) / h_;
      s += std::exp(-0.5 * z * z);
    }
    return s / (static_cast<double>(x_.size()) * h_ * std::sqrt(2.0 * special::kPi));
  }

  double cdf(double t) const {
    double s = 0.0;
    for (double v : x_) s += 0.5 * std::erfc(-(t - v) / (h_ * std::sqrt(2.0)));
    return s / static_cast<double>(x_.size());
  }

  double quantile(double p) const {
    double lo = x_.front() - 10.0 * h_;
    double hi = x_.back() + 10.0 * h_;
    for (int i = 0; i < 100 && hi - lo > 1e-12 * std::max(1.0, std::abs(lo)); ++i) {
      const double mid = 0.5 * (lo + hi);
      (cdf(mid) < p ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
  }

  Density density() const {
    return {[this](double t) { return pdf(t); }, quantile(0.001), quantile(0.999)};
  }

 private:
  double sorted_quantile(double p) const {
    const double pos = p * static_cast<double>(x_.size() - 1);
    const auto i = static_cast<std::size_t>(pos);
    const double f = pos - static_cast<double>(i);
    return i + 1 < x_.size() ? x_[i] + f * (x_[i + 1] - x_[i]) : x_[i];
  }

  std::vector<double> x_;
  double h_ = 1.0;
};

/// 100 (1 - 0.5 * integral |a - b|), clamped to [0, 100].
inline double accuracy_between(const Density& a, const Density& b, int points = 4096) {
  std::vector<std::pair<double, double>> ranges{{a.lo, a.hi}, {b.lo, b.hi}};
  std::sort(ranges.begin(), ranges.end());
  std::vector<std::pair<double, double>> merged{ranges.front()};
  for (std::size_t i = 1; i < ranges.size(); ++i) {
    if (ranges[i].first <= merged.back().second) {
      merged.back().second = std::max(merged.back().second, ranges[i].second);
    } else {
      merged.push_back(ranges[i]);
    }
  }
  double l1 = 0.0;
  for (const auto& [lo, hi] : merged) {
    if (!(hi > lo)) continue;
    const double dx = (hi - lo) / static_cast<double>(points - 1);
    double prev = std::abs(a.pdf(lo) - b.pdf(lo));
    for (int i = 1; i < points; ++i) {
      const double t = lo + dx * static_cast<double>(i);
      const double cur = std::abs(a.pdf(t) - b.pdf(t));
      l1 += 0.5 * (prev + cur) * dx;
      prev = cur;
    }
  }
  return std::clamp(100.0 * (1.0 - 0.5 * l1), 0.0, 100.0);
}

/// Accuracy of q against the kernel density estimate of MCMC draws.
inline double accuracy_score(const Density& q, std::span<const double> samples) {
  if (samples.size() < 100) throw DataError("accuracy needs at least 100 samples");
  const KernelDensity kde(samples);
  return accuracy_between(q, kde.density());
}

}  // namespace countvb
