#pragma once

// Batch non-conjugate variational message passing for Poisson and Negative
// Binomial additive mixed models.
//
// q(beta, u) is N(mu, Sigma); q(sigma_l^2) and q(a_l) are Inverse-Gamma; for
// the Negative Binomial family q(g_i) is Gamma and q(kappa) is the
// H-normalized density on [kappa_min, kappa_max]. One cycle, in order:
//
//   M     <- blockdiag(sigma_beta^-2 I_p, mu_q(1/sigma_1^2) I_K1, ...)
//   Poisson:  w <- exp(C mu + diag(C Sigma C^T)/2)
//             mu <- mu + Sigma {C^T (y - w) - M mu};  mu_q(g) <- 1, mu_q(kappa) <- 1
//   NegBin:   w <- exp(-C mu + diag(C Sigma C^T)/2)
//             mu_q(g) <- (mu_q(kappa) + y) / (1 + mu_q(kappa) w)
//             mu <- mu + Sigma {mu_q(kappa) C^T (mu_q(g) . w - 1) - M mu}
//             mu_q(log g) <- digamma(mu_q(kappa) + y) - log(1 + mu_q(kappa) w)
//             C1 <- 1^T C mu - 1^T mu_q(log g) + mu_q(g)^T w
//             mu_q(kappa) <- H(1, n, C1, .) / H(0, n, C1, .)
//   Sigma <- {mu_q(kappa) C^T diag(mu_q(g) . w) C + M}^-1
//   per block: mu_q(1/a_l) <- 1 / (mu_q(1/sigma_l^2) + A_l^-2)
//              mu_q(1/sigma_l^2) <- (K_l + 1) / (2 mu_q(1/a_l) + |mu_ul|^2 + tr Sigma_ul)
//
// iterated until the relative change in the marginal log-likelihood lower
// bound is below tolerance.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <json.hpp>

#include "countvb/errors.hpp"
#include "countvb/model.hpp"
#include "countvb/quadrature.hpp"
#include "countvb/special.hpp"

namespace countvb {

struct GaussianQ {
  Eigen::VectorXd mu;
  Eigen::MatrixXd Sigma;
};

/// q-density summaries for one variance block: sigma_l^2 ~ IG(sigma2_shape,
/// sigma2_rate), a_l ~ IG(a_shape, a_rate).
struct VarianceBlockQ {
  double recip_sigma2 = 1.0;  // mu_q(1/sigma_l^2)
  double recip_a = 1.0;       // mu_q(1/a_l)
  double sigma2_shape = 1.0;
  double sigma2_rate = 1.0;
  double a_shape = 1.0;
  double a_rate = 1.0;
};

struct VarianceQ {
  std::vector<VarianceBlockQ> blocks;
};

struct NegBinAux {
  Eigen::VectorXd mu_g;
  Eigen::VectorXd mu_log_g;
  double mu_kappa = 1.0;
  double C1 = 0.0;
};

/// Full variational state threaded through the cycle.
struct VmpState {
  GaussianQ gaussian;
  VarianceQ variances;
  NegBinAux aux;
  Eigen::VectorXd w;
};

enum class InitMode {
  /// mu = 0, Sigma = I.
  Identity,
  /// mu at the penalized Poisson mode under the initial prior precision;
  /// Sigma from one covariance update at that mean with the Sigma-dependent
  /// terms dropped.
  Informed,
};

struct FitConfig {
  double tol = 1e-10;
  int max_iter = 500;
  InitMode init = InitMode::Informed;
  double exp_clamp = 700.0;
  /// Also require the last cycle to move every state component by less than
  /// this (relative); 0 disables.
  double state_tol = 1e-11;
};

struct FitResult {
  Family family = Family::Poisson;
  GaussianQ gaussian;
  VarianceQ variances;
  std::optional<NegBinAux> negbin;
  std::vector<double> elbo_trace;
  int iterations = 0;
  bool converged = false;
  Eigen::VectorXd w;
  std::vector<bool> clamp_trace;  // per iteration: an exponent hit the clamp
};

/// Everything the updates read but never write.
struct Problem {
  Family family = Family::Poisson;
  Eigen::MatrixXd C;
  Eigen::VectorXd y;
  Eigen::Index p = 1;
  std::vector<int> block_sizes;
  Hyperparameters hyper;

  Eigen::Index n() const { return C.rows(); }
  Eigen::Index P() const { return C.cols(); }
  std::size_t r() const { return block_sizes.size(); }

  BlockRange block(std::size_t l) const {
    Eigen::Index offset = p;
    for (std::size_t j = 0; j < l; ++j) offset += block_sizes[j];
    return {offset, block_sizes.at(l)};
  }
};

inline Problem make_problem(Family family, const DesignBlocks& design, const Eigen::VectorXd& y,
                            const Hyperparameters& hyper) {
  if (y.size() != design.n()) throw DataError("response length differs from design rows");
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    if (!(y(i) >= 0.0) || y(i) != std::floor(y(i))) {
      throw DataError("responses must be nonnegative integers (row " + std::to_string(i + 1) + ")");
    }
  }
  hyper.validate(design.r());
  return Problem{family, design.C, y, design.p(), design.block_sizes, hyper};
}

// ---------------------------------------------------------------------------
// building blocks

/// Diagonal of M_q(1/sigma^2).
inline Eigen::VectorXd prior_precision(const Problem& prob, const VarianceQ& var) {
  Eigen::VectorXd m(prob.P());
  m.head(prob.p).setConstant(1.0 / (prob.hyper.sigma_beta * prob.hyper.sigma_beta));
  for (std::size_t l = 0; l < prob.r(); ++l) {
    const auto b = prob.block(l);
    m.segment(b.offset, b.size).setConstant(var.blocks[l].recip_sigma2);
  }
  return m;
}

/// diagonal(C Sigma C^T)
inline Eigen::VectorXd quad_form_diag(const Eigen::MatrixXd& C, const Eigen::MatrixXd& Sigma) {
  return (C * Sigma).cwiseProduct(C).rowwise().sum();
}

/// exp(sign * C mu + diag(C Sigma C^T)/2) with exponents clamped at `limit`.
/// Returns true when any exponent was clamped.
inline bool working_weights(const Eigen::MatrixXd& C, const GaussianQ& g, double sign, double limit,
                            Eigen::VectorXd& w) {
  Eigen::VectorXd arg = sign * (C * g.mu) + 0.5 * quad_form_diag(C, g.Sigma);
  bool clamped = false;
  for (Eigen::Index i = 0; i < arg.size(); ++i) {
    if (!(arg(i) <= limit)) {
      arg(i) = limit;
      clamped = true;
    }
  }
  w = arg.array().exp();
  return clamped;
}

inline VarianceQ initial_variances(const Problem& prob) {
  VarianceQ var;
  for (std::size_t l = 0; l < prob.r(); ++l) {
    VarianceBlockQ b;
    b.sigma2_shape = 0.5 * (prob.block_sizes[l] + 1.0);
    b.a_shape = 1.0;
    b.a_rate = b.recip_sigma2 + 1.0 / (prob.hyper.A[l] * prob.hyper.A[l]);
    b.sigma2_rate = b.sigma2_shape / b.recip_sigma2;
    var.blocks.push_back(b);
  }
  return var;
}

// ---------------------------------------------------------------------------
// updates

/// Poisson branch: w and mu, then mu_q(g) <- 1, mu_q(kappa) <- 1.
inline bool poisson_mean_update(const Problem& prob, VmpState& s, const Eigen::VectorXd& M,
                                double clamp = 700.0) {
  const bool clamped = working_weights(prob.C, s.gaussian, 1.0, clamp, s.w);
  const Eigen::VectorXd grad = prob.C.transpose() * (prob.y - s.w) - M.cwiseProduct(s.gaussian.mu);
  s.gaussian.mu += s.gaussian.Sigma * grad;
  s.aux.mu_g = Eigen::VectorXd::Ones(prob.n());
  s.aux.mu_kappa = 1.0;
  return clamped;
}

/// Negative Binomial branch: g, the Gaussian mean, log g, C1, then kappa, in that order.
inline bool negbin_updates(const Problem& prob, VmpState& s, const Eigen::VectorXd& M,
                           double clamp = 700.0) {
  const bool clamped = working_weights(prob.C, s.gaussian, -1.0, clamp, s.w);
  const double kappa = s.aux.mu_kappa;
  const Eigen::ArrayXd denom = 1.0 + kappa * s.w.array();
  s.aux.mu_g = ((kappa + prob.y.array()) / denom).matrix();

  const Eigen::VectorXd resid = (s.aux.mu_g.cwiseProduct(s.w).array() - 1.0).matrix();
  const Eigen::VectorXd grad = kappa * (prob.C.transpose() * resid) - M.cwiseProduct(s.gaussian.mu);
  s.gaussian.mu += s.gaussian.Sigma * grad;

  s.aux.mu_log_g.resize(prob.n());
  for (Eigen::Index i = 0; i < prob.n(); ++i) {
    s.aux.mu_log_g(i) = special::digamma(kappa + prob.y(i)) - std::log(denom(i));
  }
  s.aux.C1 = (prob.C * s.gaussian.mu).sum() - s.aux.mu_log_g.sum() + s.aux.mu_g.dot(s.w);
  s.aux.mu_kappa = kappa_posterior_mean(static_cast<double>(prob.n()), s.aux.C1,
                                        prob.hyper.kappa_min, prob.hyper.kappa_max);
  return clamped;
}

/// The bracket mu_q(kappa) C^T diag(mu_q(g) . w) C + M.
inline Eigen::MatrixXd covariance_bracket(const Problem& prob, const VmpState& s,
                                          const Eigen::VectorXd& M) {
  const Eigen::VectorXd weight = s.aux.mu_kappa * s.aux.mu_g.cwiseProduct(s.w);
  Eigen::MatrixXd bracket = prob.C.transpose() * weight.asDiagonal() * prob.C;
  bracket.diagonal() += M;
  return bracket;
}

inline void covariance_update(const Problem& prob, VmpState& s, const Eigen::VectorXd& M,
                              int iteration = 0) {
  Eigen::MatrixXd bracket = covariance_bracket(prob, s, M);
  Eigen::LLT<Eigen::MatrixXd> llt(bracket);
  if (llt.info() != Eigen::Success || !bracket.allFinite()) {
    throw NumericalError("covariance bracket is not positive definite", iteration);
  }
  Eigen::MatrixXd Sigma = llt.solve(Eigen::MatrixXd::Identity(prob.P(), prob.P()));
  s.gaussian.Sigma = 0.5 * (Sigma + Sigma.transpose());
  Eigen::LLT<Eigen::MatrixXd> check(s.gaussian.Sigma);
  if (check.info() != Eigen::Success) {
    throw NumericalError("updated covariance failed its Cholesky check", iteration);
  }
}

inline void variance_param_update(const Problem& prob, VmpState& s) {
  for (std::size_t l = 0; l < prob.r(); ++l) {
    const auto b = prob.block(l);
    auto& q = s.variances.blocks[l];
    const double A = prob.hyper.A[l];
    q.a_shape = 1.0;
    q.a_rate = q.recip_sigma2 + 1.0 / (A * A);
    q.recip_a = 1.0 / q.a_rate;
    const double ss = s.gaussian.mu.segment(b.offset, b.size).squaredNorm() +
                      s.gaussian.Sigma.diagonal().segment(b.offset, b.size).sum();
    q.sigma2_shape = 0.5 * (b.size + 1.0);
    q.sigma2_rate = q.recip_a + 0.5 * ss;
    q.recip_sigma2 = (b.size + 1.0) / (2.0 * q.recip_a + ss);
  }
}

// ---------------------------------------------------------------------------
// objective

namespace detail {

/// Terms shared by both families' lower bounds: everything except the
/// likelihood contribution.
inline double elbo_prior_terms(const Problem& prob, const VmpState& s) {
  const auto& g = s.gaussian;
  const double P = static_cast<double>(prob.P());
  const double p = static_cast<double>(prob.p);
  const double sb2 = prob.hyper.sigma_beta * prob.hyper.sigma_beta;
  Eigen::LLT<Eigen::MatrixXd> llt(g.Sigma);
  const double log_det = 2.0 * llt.matrixLLT().diagonal().array().log().sum();

  double v = 0.5 * P - static_cast<double>(prob.r()) * std::log(special::kPi) - 0.5 * p * std::log(sb2) +
             0.5 * log_det -
             (g.mu.head(prob.p).squaredNorm() + g.Sigma.diagonal().head(prob.p).sum()) / (2.0 * sb2);
  for (std::size_t l = 0; l < prob.r(); ++l) {
    const auto b = prob.block(l);
    const auto& q = s.variances.blocks[l];
    const double A = prob.hyper.A[l];
    const double K = static_cast<double>(b.size);
    const double ss = g.mu.segment(b.offset, b.size).squaredNorm() +
                      g.Sigma.diagonal().segment(b.offset, b.size).sum();
    v += q.recip_a * q.recip_sigma2 - std::log(A) - std::log(q.recip_sigma2 + 1.0 / (A * A)) +
         special::lgamma(0.5 * (K + 1.0)) - 0.5 * (K + 1.0) * std::log(q.recip_a + 0.5 * ss);
  }
  return v;
}

inline double sum_log_factorial(const Eigen::VectorXd& y) {
  double v = 0.0;
  for (Eigen::Index i = 0; i < y.size(); ++i) v += special::log_factorial(y(i));
  return v;
}

}  // namespace detail

/// C1 from its definition at the current state.
inline double negbin_C1(const Problem& prob, const VmpState& s) {
  const Eigen::VectorXd w =
      (-(prob.C * s.gaussian.mu) + 0.5 * quad_form_diag(prob.C, s.gaussian.Sigma)).array().exp();
  return (prob.C * s.gaussian.mu).sum() - s.aux.mu_log_g.sum() + s.aux.mu_g.dot(w);
}

/// log of the marginal log-likelihood lower bound.
inline double elbo(const Problem& prob, const VmpState& s) {
  const auto& g = s.gaussian;
  const Eigen::VectorXd eta = prob.C * g.mu;
  const Eigen::VectorXd half_var = 0.5 * quad_form_diag(prob.C, g.Sigma);
  double v = detail::elbo_prior_terms(prob, s) - detail::sum_log_factorial(prob.y);

  if (prob.family == Family::Poisson) {
    v += prob.y.dot(eta) - (eta + half_var).array().exp().sum();
    return v;
  }

  const double kappa = s.aux.mu_kappa;
  const Eigen::ArrayXd w = (-eta + half_var).array().exp();
  for (Eigen::Index i = 0; i < prob.n(); ++i) {
    v += special::lgamma(kappa + prob.y(i)) - (prob.y(i) + kappa) * std::log1p(kappa * w(i));
  }
  v += -kappa * s.aux.mu_log_g.sum() + kappa * s.aux.mu_g.dot(w.matrix());
  const double C1 = negbin_C1(prob, s);
  const HArgs h{0.0, static_cast<double>(prob.n()), C1, prob.hyper.kappa_min, prob.hyper.kappa_max};
  v += log_H_average(h);  // log H(0, n, C1, .) - log(kappa_max - kappa_min)
  return v;
}

/// Expected log joint restricted to the terms involving (mu, Sigma), plus
/// the constants that accompany them.
inline double expected_log_joint_S(const Problem& prob, const Eigen::VectorXd& mu,
                                   const Eigen::MatrixXd& Sigma, const VmpState& s) {
  const Eigen::VectorXd M = prior_precision(prob, s.variances);
  const Eigen::VectorXd eta = prob.C * mu;
  const Eigen::VectorXd half_var = 0.5 * quad_form_diag(prob.C, Sigma);
  const double P = static_cast<double>(prob.P());
  const double p = static_cast<double>(prob.p);
  const double sb2 = prob.hyper.sigma_beta * prob.hyper.sigma_beta;

  double v = -0.5 * (M.dot(mu.cwiseProduct(mu)) + M.dot(Sigma.diagonal()));
  v += -0.5 * P * std::log(2.0 * special::kPi) - 0.5 * p * std::log(sb2);
  for (std::size_t l = 0; l < prob.r(); ++l) {
    const auto& q = s.variances.blocks[l];
    const double e_log_sigma2 = std::log(q.sigma2_rate) - special::digamma(q.sigma2_shape);
    v -= 0.5 * prob.block_sizes[l] * e_log_sigma2;
  }

  if (prob.family == Family::Poisson) {
    v += prob.y.dot(eta) - (eta + half_var).array().exp().sum() - detail::sum_log_factorial(prob.y);
    return v;
  }

  const double kappa = s.aux.mu_kappa;
  const double n = static_cast<double>(prob.n());
  const KappaPosterior qk(n, s.aux.C1, prob.hyper.kappa_min, prob.hyper.kappa_max);
  const double e_klogk = qk.expect([](double k) { return k * std::log(k); });
  const double e_lgamma = qk.expect([](double k) { return special::lgamma(k); });
  v += n * e_klogk - kappa * eta.sum() - n * e_lgamma + (kappa - 1.0) * s.aux.mu_log_g.sum() -
       kappa * s.aux.mu_g.dot((-eta + half_var).array().exp().matrix());
  return v;
}

/// Closed-form gradient of S with respect to mu.
inline Eigen::VectorXd grad_mu_S(const Problem& prob, const Eigen::VectorXd& mu,
                                 const Eigen::MatrixXd& Sigma, const VmpState& s) {
  const Eigen::VectorXd M = prior_precision(prob, s.variances);
  const Eigen::VectorXd half_var = 0.5 * quad_form_diag(prob.C, Sigma);
  if (prob.family == Family::Poisson) {
    const Eigen::VectorXd w = (prob.C * mu + half_var).array().exp();
    return prob.C.transpose() * (prob.y - w) - M.cwiseProduct(mu);
  }
  const Eigen::VectorXd w = (-(prob.C * mu) + half_var).array().exp();
  const Eigen::VectorXd resid = (s.aux.mu_g.cwiseProduct(w).array() - 1.0).matrix();
  return s.aux.mu_kappa * (prob.C.transpose() * resid) - M.cwiseProduct(mu);
}

/// Closed-form derivative of S with respect to Sigma, reshaped to P x P:
/// -(C^T diag(weight) C + M) / 2.
inline Eigen::MatrixXd grad_Sigma_S(const Problem& prob, const Eigen::VectorXd& mu,
                                    const Eigen::MatrixXd& Sigma, const VmpState& s) {
  const Eigen::VectorXd M = prior_precision(prob, s.variances);
  const Eigen::VectorXd half_var = 0.5 * quad_form_diag(prob.C, Sigma);
  Eigen::VectorXd weight;
  if (prob.family == Family::Poisson) {
    weight = (prob.C * mu + half_var).array().exp();
  } else {
    weight = s.aux.mu_kappa *
             s.aux.mu_g.cwiseProduct((-(prob.C * mu) + half_var).array().exp().matrix());
  }
  Eigen::MatrixXd D = prob.C.transpose() * weight.asDiagonal() * prob.C;
  D.diagonal() += M;
  return -0.5 * D;
}

// ---------------------------------------------------------------------------
// driver

/// Mode of the penalized Poisson log-likelihood y^T C mu - 1^T exp(C mu) -
/// mu^T M mu / 2 by damped Newton, started from the intercept-only fit.
inline Eigen::VectorXd penalized_poisson_mode(const Problem& prob, const Eigen::VectorXd& M,
                                              int max_iter = 100) {
  Eigen::VectorXd mu = Eigen::VectorXd::Zero(prob.P());
  mu(0) = std::log(prob.y.mean() + 0.1);
  auto objective = [&](const Eigen::VectorXd& m) {
    const Eigen::VectorXd eta = prob.C * m;
    return prob.y.dot(eta) - eta.array().exp().sum() - 0.5 * M.dot(m.cwiseProduct(m));
  };
  double current = objective(mu);
  for (int it = 0; it < max_iter; ++it) {
    const Eigen::VectorXd w = (prob.C * mu).array().exp();
    const Eigen::VectorXd grad = prob.C.transpose() * (prob.y - w) - M.cwiseProduct(mu);
    Eigen::MatrixXd H = prob.C.transpose() * w.asDiagonal() * prob.C;
    H.diagonal() += M;
    const Eigen::VectorXd step = H.llt().solve(grad);
    double t = 1.0;
    Eigen::VectorXd next = mu + step;
    double value = objective(next);
    while (!(value >= current) && t > 1e-10) {
      t *= 0.5;
      next = mu + t * step;
      value = objective(next);
    }
    if (!(value >= current)) break;
    mu = next;
    current = value;
    if ((t * step).cwiseAbs().maxCoeff() < 1e-10) break;
  }
  return mu;
}

inline VmpState initial_state(const Problem& prob, const FitConfig& cfg) {
  VmpState s;
  s.variances = initial_variances(prob);
  s.aux.mu_kappa = 1.0;
  s.aux.mu_g = Eigen::VectorXd::Ones(prob.n());
  s.aux.mu_log_g = Eigen::VectorXd::Zero(prob.n());
  s.gaussian.mu = Eigen::VectorXd::Zero(prob.P());
  s.w = Eigen::VectorXd::Ones(prob.n());
  if (cfg.init == InitMode::Identity) {
    s.gaussian.Sigma = Eigen::MatrixXd::Identity(prob.P(), prob.P());
    return s;
  }
  const Eigen::VectorXd M = prior_precision(prob, s.variances);
  s.gaussian.mu = penalized_poisson_mode(prob, M);
  s.gaussian.Sigma = Eigen::MatrixXd::Zero(prob.P(), prob.P());
  const double sign = prob.family == Family::Poisson ? 1.0 : -1.0;
  working_weights(prob.C, s.gaussian, sign, cfg.exp_clamp, s.w);
  if (prob.family == Family::NegativeBinomial) {
    s.aux.mu_g = ((1.0 + prob.y.array()) / (1.0 + s.w.array())).matrix();
  }
  covariance_update(prob, s, M);
  return s;
}

/// One full cycle in update order: mean, covariance, variances. Returns whether an exponent was clamped.
inline bool vmp_cycle(const Problem& prob, VmpState& s, const FitConfig& cfg, int iteration = 0) {
  const Eigen::VectorXd M = prior_precision(prob, s.variances);
  const bool clamped = prob.family == Family::Poisson
                           ? poisson_mean_update(prob, s, M, cfg.exp_clamp)
                           : negbin_updates(prob, s, M, cfg.exp_clamp);
  covariance_update(prob, s, M, iteration);
  variance_param_update(prob, s);
  return clamped;
}

/// Thrown when the lower bound stops being finite; carries the state at the
/// failing iteration for diagnosis.
class FitDivergedError : public NumericalError {
 public:
  FitDivergedError(const std::string& what, int iteration, VmpState state)
      : NumericalError(what, iteration), state_(std::move(state)) {}
  const VmpState& state() const { return state_; }

 private:
  VmpState state_;
};

inline FitResult make_result(const Problem& prob, const VmpState& s) {
  FitResult r;
  r.family = prob.family;
  r.gaussian = s.gaussian;
  r.variances = s.variances;
  if (prob.family == Family::NegativeBinomial) r.negbin = s.aux;
  r.w = s.w;
  return r;
}

inline VmpState state_from_result(const FitResult& r) {
  VmpState s;
  s.gaussian = r.gaussian;
  s.variances = r.variances;
  s.w = r.w;
  if (r.negbin) {
    s.aux = *r.negbin;
  } else {
    s.aux.mu_g = Eigen::VectorXd::Ones(r.w.size());
    s.aux.mu_log_g = Eigen::VectorXd::Zero(r.w.size());
    s.aux.mu_kappa = 1.0;
  }
  return s;
}

/// Largest relative change in each group of quantities between two states.
struct FixedPointResidual {
  double mu = 0.0;
  double Sigma = 0.0;
  double variances = 0.0;
  double kappa = 0.0;

  double max() const { return std::max({mu, Sigma, variances, kappa}); }
};

inline FixedPointResidual state_change(const VmpState& before, const VmpState& after) {
  auto rel = [](const auto& a, const auto& b) {
    const double scale = std::max(a.cwiseAbs().maxCoeff(), 1e-300);
    return (a - b).cwiseAbs().maxCoeff() / scale;
  };
  FixedPointResidual res;
  res.mu = rel(before.gaussian.mu, after.gaussian.mu);
  res.Sigma = rel(before.gaussian.Sigma, after.gaussian.Sigma);
  for (std::size_t l = 0; l < before.variances.blocks.size(); ++l) {
    const auto& a = before.variances.blocks[l];
    const auto& b = after.variances.blocks[l];
    res.variances = std::max({res.variances, std::abs(a.recip_sigma2 - b.recip_sigma2) / a.recip_sigma2,
                              std::abs(a.recip_a - b.recip_a) / a.recip_a});
  }
  res.kappa = std::abs(before.aux.mu_kappa - after.aux.mu_kappa) / before.aux.mu_kappa;
  return res;
}

inline FitResult fit(const Problem& prob, const FitConfig& cfg = {}) {
  VmpState s = initial_state(prob, cfg);
  std::vector<double> trace;
  std::vector<bool> clamps;
  bool converged = false;
  for (int it = 1; it <= cfg.max_iter; ++it) {
    const VmpState before = s;
    const bool clamped = vmp_cycle(prob, s, cfg, it);
    const double step = state_change(before, s).max();
    const double e = elbo(prob, s);
    if (!std::isfinite(e)) throw FitDivergedError("lower bound is not finite", it, s);
    trace.push_back(e);
    clamps.push_back(clamped);
    if (it < 2) continue;
    const double prev = trace[trace.size() - 2];
    const bool small = std::abs(e - prev) / (std::abs(e) + 1.0) < cfg.tol;
    const std::size_t window = std::min<std::size_t>(5, clamps.size());
    const bool clamp_free = std::none_of(clamps.end() - static_cast<std::ptrdiff_t>(window),
                                         clamps.end(), [](bool c) { return c; });
    if (small && clamp_free && (cfg.state_tol <= 0.0 || step < cfg.state_tol)) {
      converged = true;
      break;
    }
  }
  FitResult r = make_result(prob, s);
  r.elbo_trace = std::move(trace);
  r.clamp_trace = std::move(clamps);
  r.iterations = static_cast<int>(r.elbo_trace.size());
  r.converged = converged;
  return r;
}

inline FitResult fit(Family family, const DesignBlocks& design, const Eigen::VectorXd& y,
                     const Hyperparameters& hyper, const FitConfig& cfg = {}) {
  return fit(make_problem(family, design, y, hyper), cfg);
}

/// Change produced by one more cycle applied to a fitted state.
inline FixedPointResidual fixed_point_residual(const Problem& prob, const FitResult& r,
                                               const FitConfig& cfg = {}) {
  const VmpState before = state_from_result(r);
  VmpState after = before;
  vmp_cycle(prob, after, cfg);
  return state_change(before, after);
}

// ---------------------------------------------------------------------------
// prediction

struct Prediction {
  Eigen::VectorXd mean;
  Eigen::VectorXd lower95;
  Eigen::VectorXd upper95;
  Eigen::VectorXd eta_mean;
  Eigen::VectorXd eta_sd;
};

/// Under q the linear predictor c^T(beta, u) is N(c^T mu, c^T Sigma c);
/// the mean response is its log-normal mean and the bands are exponentiated
/// 95% Normal quantiles.
inline Prediction predict(const GaussianQ& g, const Eigen::MatrixXd& rows) {
  Prediction out;
  out.eta_mean = rows * g.mu;
  out.eta_sd = quad_form_diag(rows, g.Sigma).cwiseMax(0.0).cwiseSqrt();
  const Eigen::ArrayXd m = out.eta_mean.array();
  const Eigen::ArrayXd sd = out.eta_sd.array();
  out.mean = (m + 0.5 * sd.square()).exp().matrix();
  out.lower95 = (m - 1.96 * sd).exp().matrix();
  out.upper95 = (m + 1.96 * sd).exp().matrix();
  return out;
}

// ---------------------------------------------------------------------------
// serialization

namespace detail {

inline nlohmann::json to_json_vector(const Eigen::VectorXd& v) {
  return nlohmann::json(std::vector<double>(v.data(), v.data() + v.size()));
}

inline nlohmann::json to_json_matrix(const Eigen::MatrixXd& m) {
  auto rows = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const Eigen::VectorXd row = m.row(r).transpose();
    rows.push_back(to_json_vector(row));
  }
  return rows;
}

inline Eigen::VectorXd vector_from_json(const nlohmann::json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

inline Eigen::MatrixXd matrix_from_json(const nlohmann::json& j) {
  const auto rows = j.get<std::vector<std::vector<double>>>();
  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()),
                    rows.empty() ? 0 : static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t c = 0; c < rows[r].size(); ++c) {
      m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
    }
  }
  return m;
}

}  // namespace detail

inline void to_json(nlohmann::json& j, const VarianceBlockQ& q) {
  j = nlohmann::json{{"mu_recip_sigma2", q.recip_sigma2}, {"mu_recip_a", q.recip_a},
                     {"sigma2_shape", q.sigma2_shape},    {"sigma2_rate", q.sigma2_rate},
                     {"a_shape", q.a_shape},              {"a_rate", q.a_rate}};
}

inline void from_json(const nlohmann::json& j, VarianceBlockQ& q) {
  q.recip_sigma2 = j.at("mu_recip_sigma2").get<double>();
  q.recip_a = j.at("mu_recip_a").get<double>();
  q.sigma2_shape = j.at("sigma2_shape").get<double>();
  q.sigma2_rate = j.at("sigma2_rate").get<double>();
  q.a_shape = j.at("a_shape").get<double>();
  q.a_rate = j.at("a_rate").get<double>();
}

inline void to_json(nlohmann::json& j, const FitResult& r) {
  j = nlohmann::json::object();
  j["family"] = to_string(r.family);
  j["converged"] = r.converged;
  j["iterations"] = r.iterations;
  j["elbo_trace"] = r.elbo_trace;
  j["clamped_iterations"] = std::count(r.clamp_trace.begin(), r.clamp_trace.end(), true);
  j["mu"] = detail::to_json_vector(r.gaussian.mu);
  j["Sigma"] = detail::to_json_matrix(r.gaussian.Sigma);
  j["variances"] = r.variances.blocks;
  j["w"] = detail::to_json_vector(r.w);
  if (r.negbin) {
    j["negbin"] = {{"mu_g", detail::to_json_vector(r.negbin->mu_g)},
                   {"mu_log_g", detail::to_json_vector(r.negbin->mu_log_g)},
                   {"mu_kappa", r.negbin->mu_kappa},
                   {"C1", r.negbin->C1}};
  }
}

inline void from_json(const nlohmann::json& j, FitResult& r) {
  r = FitResult{};
  r.family = parse_family(j.at("family").get<std::string>());
  r.converged = j.at("converged").get<bool>();
  r.iterations = j.at("iterations").get<int>();
  r.elbo_trace = j.at("elbo_trace").get<std::vector<double>>();
  r.gaussian.mu = detail::vector_from_json(j.at("mu"));
  r.gaussian.Sigma = detail::matrix_from_json(j.at("Sigma"));
  r.variances.blocks = j.at("variances").get<std::vector<VarianceBlockQ>>();
  r.w = detail::vector_from_json(j.at("w"));
  if (j.contains("negbin")) {
    NegBinAux a;
    a.mu_g = detail::vector_from_json(j.at("negbin").at("mu_g"));
    a.mu_log_g = detail::vector_from_json(j.at("negbin").at("mu_log_g"));
    a.mu_kappa = j.at("negbin").at("mu_kappa").get<double>();
    a.C1 = j.at("negbin").at("C1").get<double>();
    r.negbin = a;
  }
}

}  // namespace countvb
