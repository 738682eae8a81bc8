#pragma once

// Replicated accuracy study on simulated additive data: for each replicate,
// fit the variational approximation and a reference chain, then score the
// approximation for mu(x1, x2) at the 3 x 3 grid of sample quartiles (on the
// linear-predictor scale), for each sigma_l^2 and for kappa (both on the log
// scale). The L1 distance is invariant under these monotone maps.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "countvb/model.hpp"
#include "countvb/oracle_mcmc.hpp"
#include "countvb/simulate.hpp"
#include "countvb/vmp_core.hpp"

namespace countvb::bench {

/// Type-7 sample quantile.
inline double quantile(std::vector<double> v, double p) {
  if (v.empty()) throw DataError("quantile of an empty sample");
  std::sort(v.begin(), v.end());
  const double pos = p * static_cast<double>(v.size() - 1);
  const auto i = static_cast<std::size_t>(pos);
  const double f = pos - static_cast<double>(i);
  return i + 1 < v.size() ? v[i] + f * (v[i + 1] - v[i]) : v[i];
}

struct StudyConfig {
  Family family = Family::Poisson;
  std::size_t n = 500;
  int K = 17;
  FitConfig fit;
  ChainConfig chain;
};

struct ReplicateResult {
  std::uint64_t seed = 0;
  bool converged = false;
  int iterations = 0;
  double fit_seconds = 0.0;
  double mcmc_seconds = 0.0;
  std::vector<double> mu_accuracy;      // 9 entries, x1 quartile major
  std::vector<double> sigma2_accuracy;  // one per smooth
  std::optional<double> kappa_accuracy;
  std::optional<double> kappa_vb;       // mu_q(kappa)
  FixedPointResidual residual;
  std::vector<double> elbo_trace;
  bool acceptance_warning = false;
};

inline ReplicateResult run_replicate(const StudyConfig& cfg, std::uint64_t seed) {
  using clock = std::chrono::steady_clock;
  ReplicateResult out;
  out.seed = seed;
  const auto data = sim::additive(seed, cfg.family, cfg.n);
  const auto design = assemble_design({data.x1, data.x2}, {{0, cfg.K}, {1, cfg.K}});
  const auto prob = make_problem(cfg.family, design, data.response(), default_hyperparameters(2));

  auto t0 = clock::now();
  const FitResult fit_result = fit(prob, cfg.fit);
  out.fit_seconds = std::chrono::duration<double>(clock::now() - t0).count();
  out.converged = fit_result.converged;
  out.iterations = fit_result.iterations;
  out.elbo_trace = fit_result.elbo_trace;
  out.residual = fixed_point_residual(prob, fit_result, cfg.fit);

  ChainConfig chain = cfg.chain;
  chain.seed = cfg.chain.seed * 1000003ULL + seed;
  t0 = clock::now();
  const PosteriorSamples draws = mcmc_fit(prob, chain);
  out.mcmc_seconds = std::chrono::duration<double>(clock::now() - t0).count();
  out.acceptance_warning = draws.acceptance_warning;

  for (double p1 : {0.25, 0.5, 0.75}) {
    for (double p2 : {0.25, 0.5, 0.75}) {
      const double record[2] = {quantile(data.x1, p1), quantile(data.x2, p2)};
      const Eigen::RowVectorXd c = design.map.row(record).c.transpose();
      const auto pred = predict(fit_result.gaussian, c);
      const Eigen::VectorXd eta = draws.theta * c.transpose();
      out.mu_accuracy.push_back(accuracy_score(normal_density(pred.eta_mean(0), pred.eta_sd(0)),
                                               std::vector<double>(eta.data(), eta.data() + eta.size())));
    }
  }
  for (std::size_t l = 0; l < prob.r(); ++l) {
    const auto& q = fit_result.variances.blocks[l];
    std::vector<double> log_draws(static_cast<std::size_t>(draws.sigma2.rows()));
    for (std::size_t i = 0; i < log_draws.size(); ++i) {
      log_draws[i] = std::log(draws.sigma2(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(l)));
    }
    out.sigma2_accuracy.push_back(accuracy_score(log_inverse_gamma_density(q.sigma2_shape, q.sigma2_rate), log_draws));
  }
  if (fit_result.negbin) {
    out.kappa_vb = fit_result.negbin->mu_kappa;
    const KappaPosterior qk(static_cast<double>(prob.n()), fit_result.negbin->C1, prob.hyper.kappa_min,
                            prob.hyper.kappa_max);
    std::vector<double> log_draws(static_cast<std::size_t>(draws.kappa.size()));
    for (std::size_t i = 0; i < log_draws.size(); ++i) log_draws[i] = std::log(draws.kappa(static_cast<Eigen::Index>(i)));
    out.kappa_accuracy = accuracy_score(log_kappa_density(qk), log_draws);
  }
  return out;
}

/// Worker count: hardware concurrency, capped by COUNTVB_THREADS when set.
inline unsigned thread_count(std::size_t jobs) {
  unsigned n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("COUNTVB_THREADS")) {
    char* end = nullptr;
    const long cap = std::strtol(env, &end, 10);
    if (end != env && cap >= 1) n = std::min<unsigned>(n, static_cast<unsigned>(cap));
  }
  return static_cast<unsigned>(std::min<std::size_t>(n, std::max<std::size_t>(jobs, 1)));
}

/// Replicates seed, seed + 1, ...; results are in replicate order whatever
/// the thread count.
inline std::vector<ReplicateResult> run_study(const StudyConfig& cfg, std::size_t replicates,
                                              std::uint64_t seed) {
  std::vector<ReplicateResult> results(replicates);
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < replicates; i = next++) {
      try {
        results[i] = run_replicate(cfg, seed + i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const unsigned threads = thread_count(replicates);
  std::vector<std::thread> pool;
  for (unsigned t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
  return results;
}

struct Summary {
  std::string parameter;
  double median = 0.0;
  double q1 = 0.0;
  double q3 = 0.0;
};

/// Median and quartiles per reported quantity, in a fixed order: the nine
/// mu points, then sigma2 per smooth, then kappa.
inline std::vector<Summary> summarize(const std::vector<ReplicateResult>& results) {
  std::vector<Summary> out;
  auto add = [&](const std::string& name, const std::vector<double>& v) {
    if (v.empty()) return;
    out.push_back({name, quantile(v, 0.5), quantile(v, 0.25), quantile(v, 0.75)});
  };
  const char* labels[3] = {"Q1", "Q2", "Q3"};
  for (std::size_t k = 0; k < 9; ++k) {
    std::vector<double> v;
    for (const auto& r : results) v.push_back(r.mu_accuracy.at(k));
    add(std::string("mu(x1=") + labels[k / 3] + ",x2=" + labels[k % 3] + ")", v);
  }
  const std::size_t r = results.empty() ? 0 : results.front().sigma2_accuracy.size();
  for (std::size_t l = 0; l < r; ++l) {
    std::vector<double> v;
    for (const auto& res : results) v.push_back(res.sigma2_accuracy.at(l));
    add("sigma2_" + std::to_string(l + 1), v);
  }
  std::vector<double> kv;
  for (const auto& res : results) {
    if (res.kappa_accuracy) kv.push_back(*res.kappa_accuracy);
  }
  add("kappa", kv);
  return out;
}

}  // namespace countvb::bench
