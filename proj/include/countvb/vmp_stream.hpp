#pragma once

// Real-time Poisson fitting. A batch fit on the first n_warm records seeds
// the moments and the running statistics C^T y, C^T w, C^T diag(w) C; each
// new record (y_new, c_new) then runs
//
//   n <- n + 1
//   M <- blockdiag(sigma_beta^-2 I_p, mu_q(1/sigma_1^2) I_K1, ...)
//   w_new <- exp(c_new^T mu + c_new^T Sigma c_new / 2)
//   C^T y += c_new y_new;  C^T w += c_new w_new;  C^T diag(w) C += w_new c_new c_new^T
//   mu <- mu_prev + Sigma {C^T y - C^T w - M mu}
//   if n % F_update == 0: mu_prev <- mu
//   Sigma <- (C^T diag(w) C + M)^-1
//   variance blocks as in the batch cycle.
//
// The bracket's Cholesky factor is carried along and patched by rank-one
// updates (w_new c c^T, plus one update or downdate per diagonal entry of M
// that moved) instead of being refactored; a full refactor is the reference
// path and is also applied every `refactor_every` ingests to bound drift.

#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <utility>

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include "countvb/errors.hpp"
#include "countvb/model.hpp"
#include "countvb/vmp_core.hpp"

namespace countvb {

struct StreamConfig {
  std::size_t F_update = 100;
  bool fast_sigma = true;
  std::size_t refactor_every = 1000;  // 0: never refactor on the fast path
  double exp_clamp = 700.0;
};

/// Running sufficient statistics.
struct StreamStatistics {
  Eigen::VectorXd Cty;
  Eigen::VectorXd Ctw;
  Eigen::MatrixXd CtWC;

  StreamStatistics() : StreamStatistics(0) {}
  explicit StreamStatistics(Eigen::Index P)
      : Cty(Eigen::VectorXd::Zero(P)), Ctw(Eigen::VectorXd::Zero(P)), CtWC(Eigen::MatrixXd::Zero(P, P)) {}

  void add(const Eigen::VectorXd& c, double y, double w) {
    Cty += c * y;
    Ctw += c * w;
    CtWC.noalias() += (w * c) * c.transpose();
  }
};

/// Row-by-row accumulation, in row order, of the statistics for (C, y, w).
inline StreamStatistics accumulate_statistics(const Eigen::MatrixXd& C, const Eigen::VectorXd& y,
                                              const Eigen::VectorXd& w) {
  StreamStatistics stats(C.cols());
  for (Eigen::Index i = 0; i < C.rows(); ++i) stats.add(C.row(i).transpose(), y(i), w(i));
  return stats;
}

struct StreamState {
  Problem problem;  // warm-up problem: family, p, block sizes, hyperparameters
  DesignMap map;
  StreamConfig config;
  FitResult warm_fit;

  std::size_t n = 0;
  StreamStatistics stats;
  GaussianQ gaussian;
  VarianceQ variances;
  Eigen::VectorXd mu_prev;

  Eigen::VectorXd sigma_M;  // M in the bracket that produced the current Sigma

  Eigen::LLT<Eigen::MatrixXd> factor;  // of CtWC + factor_M
  Eigen::VectorXd factor_M;
  std::size_t since_refactor = 0;

  std::size_t ingested = 0;
  std::size_t rejected = 0;
  std::size_t clamped = 0;
};

/// Runs the batch fit on the warm-up records and seeds the running state.
inline StreamState warmup(const DesignBlocks& design, const Eigen::VectorXd& y, const Hyperparameters& hyper,
                          const FitConfig& fit_cfg = {}, const StreamConfig& cfg = {}) {
  if (cfg.F_update < 1) throw ParameterError("F_update must be at least 1");
  StreamState s;
  s.problem = make_problem(Family::Poisson, design, y, hyper);
  s.map = design.map;
  s.config = cfg;
  s.warm_fit = fit(s.problem, fit_cfg);
  if (!s.warm_fit.converged) {
    throw NumericalError("warm-up fit did not converge after " + std::to_string(s.warm_fit.iterations) +
                             " iterations; use a larger warm-up sample",
                         s.warm_fit.iterations);
  }
  s.n = static_cast<std::size_t>(design.n());
  s.stats = accumulate_statistics(design.C, y, s.warm_fit.w);
  s.gaussian = s.warm_fit.gaussian;
  s.variances = s.warm_fit.variances;
  s.mu_prev = s.gaussian.mu;
  return s;
}

namespace detail {

inline Eigen::MatrixXd stream_bracket(const StreamState& s, const Eigen::VectorXd& M) {
  Eigen::MatrixXd B = s.stats.CtWC;
  B.diagonal() += M;
  return B;
}

inline void refactor(StreamState& s, const Eigen::VectorXd& M, std::size_t step) {
  const Eigen::MatrixXd B = stream_bracket(s, M);
  s.factor.compute(B);
  if (s.factor.info() != Eigen::Success || !B.allFinite()) {
    throw NumericalError("streaming bracket is not positive definite", static_cast<int>(step));
  }
  s.factor_M = M;
  s.since_refactor = 0;
}

/// Brings the factor from CtWC_old + factor_M to CtWC_old + w c c^T + M.
inline bool patch_factor(StreamState& s, const Eigen::VectorXd& c, double w, const Eigen::VectorXd& M) {
  s.factor.rankUpdate(c, w);
  if (s.factor.info() != Eigen::Success) return false;
  Eigen::VectorXd e = Eigen::VectorXd::Zero(M.size());
  for (Eigen::Index j = 0; j < M.size(); ++j) {
    const double delta = M(j) - s.factor_M(j);
    if (delta == 0.0) continue;
    e(j) = std::sqrt(std::abs(delta));
    s.factor.rankUpdate(e, delta > 0.0 ? 1.0 : -1.0);
    e(j) = 0.0;
    if (s.factor.info() != Eigen::Success) return false;
  }
  s.factor_M = M;
  s.since_refactor += 1;
  return true;
}

}  // namespace detail

/// Current Sigma recomputed as (CtWC + M)^-1 by a fresh Cholesky
/// factorization, M being the prior precision it was built with.
inline Eigen::MatrixXd reference_sigma(const StreamState& s) {
  const Eigen::VectorXd& M = s.sigma_M;
  Eigen::LLT<Eigen::MatrixXd> llt(detail::stream_bracket(s, M));
  const Eigen::MatrixXd Sigma = llt.solve(Eigen::MatrixXd::Identity(M.size(), M.size()));
  return 0.5 * (Sigma + Sigma.transpose());
}

struct IngestOutcome {
  bool accepted = false;
  bool clamped = false;  // a smooth predictor was outside its warm-up range
  std::string reason;
};

/// One cycle for a prepared design row.
inline IngestOutcome ingest_row(StreamState& s, double y_new, const Eigen::VectorXd& c) {
  IngestOutcome out;
  if (!(y_new >= 0.0) || y_new != std::floor(y_new) || !std::isfinite(y_new)) {
    s.rejected += 1;
    out.reason = "response is not a nonnegative integer";
    return out;
  }
  if (c.size() != s.gaussian.mu.size() || !c.allFinite()) {
    s.rejected += 1;
    out.reason = "design row is malformed";
    return out;
  }
  const Eigen::VectorXd M = prior_precision(s.problem, s.variances);
  const double arg = c.dot(s.gaussian.mu) + 0.5 * c.dot(s.gaussian.Sigma * c);
  const double w = std::exp(arg);
  if (!std::isfinite(w) || !(arg <= s.config.exp_clamp)) {
    s.rejected += 1;
    out.reason = "working weight is not finite";
    return out;
  }

  s.n += 1;
  s.ingested += 1;
  s.stats.add(c, y_new, w);
  s.gaussian.mu = s.mu_prev + s.gaussian.Sigma * (s.stats.Cty - s.stats.Ctw - M.cwiseProduct(s.gaussian.mu));
  if (s.n % s.config.F_update == 0) s.mu_prev = s.gaussian.mu;

  const int step = static_cast<int>(s.n);
  if (s.config.fast_sigma) {
    const bool due = s.config.refactor_every > 0 && s.since_refactor + 1 >= s.config.refactor_every;
    if (s.factor_M.size() == 0 || due || !detail::patch_factor(s, c, w, M)) detail::refactor(s, M, s.n);
    const Eigen::Index P = M.size();
    Eigen::MatrixXd Sigma = s.factor.solve(Eigen::MatrixXd::Identity(P, P));
    s.gaussian.Sigma = 0.5 * (Sigma + Sigma.transpose());
  } else {
    Eigen::LLT<Eigen::MatrixXd> llt(detail::stream_bracket(s, M));
    if (llt.info() != Eigen::Success) throw NumericalError("streaming bracket is not positive definite", step);
    const Eigen::MatrixXd Sigma = llt.solve(Eigen::MatrixXd::Identity(M.size(), M.size()));
    s.gaussian.Sigma = 0.5 * (Sigma + Sigma.transpose());
  }
  s.sigma_M = M;

  VmpState v;
  v.gaussian = s.gaussian;
  v.variances = s.variances;
  variance_param_update(s.problem, v);
  s.variances = std::move(v.variances);

  out.accepted = true;
  return out;
}

/// One cycle for a raw record in original units.
inline IngestOutcome ingest(StreamState& s, double y_new, std::span<const double> x_new,
                            const std::string* group = nullptr) {
  DesignMap::Row row;
  try {
    row = s.map.row(x_new, group);
  } catch (const DataError& e) {
    s.rejected += 1;
    return {false, false, e.what()};
  }
  if (row.unknown_group) {
    s.rejected += 1;
    return {false, false, "group label not seen during warm-up"};
  }
  auto out = ingest_row(s, y_new, row.c);
  out.clamped = row.clamped;
  if (out.accepted && row.clamped) s.clamped += 1;
  return out;
}

struct StreamSnapshot {
  std::size_t n = 0;
  std::size_t ingested = 0;
  std::size_t rejected = 0;
  std::size_t clamped = 0;
  FitResult fit;  // current moments; elbo trace and convergence flag from warm-up
};

inline StreamSnapshot snapshot(const StreamState& s) {
  StreamSnapshot snap;
  snap.n = s.n;
  snap.ingested = s.ingested;
  snap.rejected = s.rejected;
  snap.clamped = s.clamped;
  snap.fit = s.warm_fit;
  snap.fit.gaussian = s.gaussian;
  snap.fit.variances = s.variances;
  return snap;
}

/// Latest published snapshot, readable from any thread while the single
/// writer keeps ingesting.
class SnapshotBoard {
 public:
  void publish(StreamSnapshot snap) {
    auto next = std::make_shared<const StreamSnapshot>(std::move(snap));
    std::lock_guard<std::mutex> lock(mutex_);
    current_ = std::move(next);
  }

  std::shared_ptr<const StreamSnapshot> latest() const {
    std::lock_guard<std::mutex> lock(mutex_);
    return current_;
  }

 private:
  mutable std::mutex mutex_;
  std::shared_ptr<const StreamSnapshot> current_;
};

}  // namespace countvb
