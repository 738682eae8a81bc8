#pragma once

// O'Sullivan penalized spline basis in mixed-model form.
//
// Cubic B-splines are placed on K-2 interior knots at equally spaced sample
// quantiles of the unique (standardized) predictor values, with the boundary
// knots at the data range. The penalty Omega is the Gram matrix of B-spline
// second derivatives, computed exactly with Simpson's rule on each knot
// interval (the integrand is a quadratic there). Omega has a two-dimensional
// null space (the linear functions, carried by the fixed effects), so its
// spectral decomposition leaves exactly K positive eigenvalues; the random
// effect columns are B U_K diag(d_K)^(-1/2), for which the prior penalty is
// the identity.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "countvb/errors.hpp"

namespace countvb {

/// Affine map to zero mean and unit standard deviation.
struct Standardization {
  double mean = 0.0;
  double sd = 1.0;

  double apply(double x) const { return (x - mean) / sd; }
  double invert(double z) const { return z * sd + mean; }

  static Standardization fit(std::span<const double> x) {
    const auto n = static_cast<double>(x.size());
    if (x.size() < 2) throw DataError("standardization needs at least two values");
    double m = 0.0;
    for (double v : x) m += v;
    m /= n;
    double ss = 0.0;
    for (double v : x) ss += (v - m) * (v - m);
    const double sd = std::sqrt(ss / (n - 1.0));
    if (!(sd > 0.0)) throw DataError("predictor has zero variance");
    return {m, sd};
  }
};

namespace spline {

inline constexpr int kDegree = 3;

/// Type-7 sample quantile of sorted data.
inline double quantile_sorted(std::span<const double> sorted, double prob) {
  const double h = (static_cast<double>(sorted.size()) - 1.0) * prob;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

/// Cubic B-spline values and second derivatives at x for a clamped knot
/// vector (boundary knots repeated four times). Returns nb = knots - 4 values.
struct BasisRow {
  Eigen::VectorXd value;
  Eigen::VectorXd second;
};

inline BasisRow eval_bspline(const std::vector<double>& knots, double x) {
  const int nk = static_cast<int>(knots.size());
  const int nb = nk - kDegree - 1;
  const double lo = knots[kDegree];
  const double hi = knots[nk - kDegree - 1];
  x = std::clamp(x, lo, hi);

  // knot span index j with knots[j] <= x < knots[j+1], closed on the right end
  int span = kDegree;
  while (span < nb - 1 && x >= knots[span + 1]) ++span;

  // order-1 .. order-4 functions supported on the span
  // b[k][i] holds B_{span-k+i, k}(x), i = 0..k
  double b[kDegree + 1][kDegree + 1] = {};
  b[0][0] = 1.0;
  for (int k = 1; k <= kDegree; ++k) {
    for (int i = 0; i <= k; ++i) {
      const int idx = span - k + i;
      double v = 0.0;
      if (i > 0) {
        const double den = knots[idx + k] - knots[idx];
        if (den > 0.0) v += (x - knots[idx]) / den * b[k - 1][i - 1];
      }
      if (i < k) {
        const double den = knots[idx + k + 1] - knots[idx + 1];
        if (den > 0.0) v += (knots[idx + k + 1] - x) / den * b[k - 1][i];
      }
      b[k][i] = v;
    }
  }

  BasisRow row{Eigen::VectorXd::Zero(nb), Eigen::VectorXd::Zero(nb)};
  for (int i = 0; i <= kDegree; ++i) row.value(span - kDegree + i) = b[kDegree][i];

  // Second derivative through the order-2 (linear) functions:
  // B''_{i,3} = 6 [ (B_{i,1}/(t_{i+2}-t_i) - B_{i+1,1}/(t_{i+3}-t_{i+1})) / (t_{i+3}-t_i)
  //               - (B_{i+1,1}/(t_{i+3}-t_{i+1}) - B_{i+2,1}/(t_{i+4}-t_{i+2})) / (t_{i+4}-t_{i+1}) ]
  auto lin = [&](int idx) -> double {
    const int rel = idx - (span - 1);
    return (rel >= 0 && rel <= 1) ? b[1][rel] : 0.0;
  };
  auto ratio = [&](int idx) -> double {
    const double den = knots[idx + 2] - knots[idx];
    return den > 0.0 ? lin(idx) / den : 0.0;
  };
  for (int i = span - kDegree; i <= span; ++i) {
    const double d1 = knots[i + 3] - knots[i];
    const double d2 = knots[i + 4] - knots[i + 1];
    double v = 0.0;
    if (d1 > 0.0) v += (ratio(i) - ratio(i + 1)) / d1;
    if (d2 > 0.0) v -= (ratio(i + 1) - ratio(i + 2)) / d2;
    row.second(i) = 6.0 * v;
  }
  return row;
}

/// Exact integrated squared second-derivative Gram matrix.
inline Eigen::MatrixXd penalty_gram(const std::vector<double>& knots) {
  const int nb = static_cast<int>(knots.size()) - kDegree - 1;
  Eigen::MatrixXd omega = Eigen::MatrixXd::Zero(nb, nb);
  for (int j = kDegree; j < nb; ++j) {
    const double a = knots[j];
    const double b = knots[j + 1];
    if (!(b > a)) continue;
    const double m = 0.5 * (a + b);
    // B'' is continuous at simple knots, so evaluating b on the next span is exact
    const Eigen::VectorXd fa = eval_bspline(knots, a).second;
    const Eigen::VectorXd fm = eval_bspline(knots, m).second;
    const Eigen::VectorXd fb = eval_bspline(knots, b).second;
    omega += (b - a) / 6.0 * (fa * fa.transpose() + 4.0 * fm * fm.transpose() + fb * fb.transpose());
  }
  return omega;
}

}  // namespace spline

/// Mixed-model O'Sullivan spline basis for one smooth term. Immutable after
/// construction.
class SplineBasis {
 public:
  struct Evaluation {
    Eigen::VectorXd z;
    bool clamped = false;
  };

  SplineBasis() = default;

  /// Builds the basis on the predictor values (raw units). Standardization
  /// is estimated from x and applied before knot placement.
  static SplineBasis build(std::span<const double> x, int K) {
    if (K < 2) throw ParameterError("spline basis needs K >= 2");
    if (static_cast<int>(x.size()) <= K + 4) throw DataError("spline basis needs n > K + 4");
    SplineBasis basis;
    basis.K_ = K;
    basis.standardization_ = Standardization::fit(x);

    std::vector<double> xs(x.size());
    std::transform(x.begin(), x.end(), xs.begin(),
                   [&](double v) { return basis.standardization_.apply(v); });
    std::vector<double> uniq = xs;
    std::sort(uniq.begin(), uniq.end());
    uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
    if (static_cast<int>(uniq.size()) < K) throw DataError("too few distinct predictor values");

    basis.lo_ = uniq.front();
    basis.hi_ = uniq.back();
    const int n_interior = K - 2;
    basis.interior_.resize(n_interior);
    for (int j = 0; j < n_interior; ++j) {
      basis.interior_[j] =
          spline::quantile_sorted(uniq, static_cast<double>(j + 1) / static_cast<double>(K - 1));
    }
    basis.init_transform();
    return basis;
  }

  /// Rebuild from persisted fields (knots, standardization); the transform is
  /// recomputed deterministically.
  static SplineBasis from_parts(std::vector<double> interior, double lo, double hi,
                                Standardization standardization) {
    SplineBasis basis;
    basis.K_ = static_cast<int>(interior.size()) + 2;
    basis.interior_ = std::move(interior);
    basis.lo_ = lo;
    basis.hi_ = hi;
    basis.standardization_ = standardization;
    if (!(basis.lo_ < basis.hi_) ||
        (!basis.interior_.empty() &&
         !(basis.lo_ < basis.interior_.front() && basis.interior_.back() < basis.hi_))) {
      throw ParameterError("interior knots must lie strictly inside the boundary");
    }
    basis.init_transform();
    return basis;
  }

  /// Random-effect design matrix for the training predictor.
  Eigen::MatrixXd design(std::span<const double> x) const {
    Eigen::MatrixXd Z(static_cast<Eigen::Index>(x.size()), K_);
    for (std::size_t i = 0; i < x.size(); ++i) Z.row(static_cast<Eigen::Index>(i)) = eval(x[i]).z;
    return Z;
  }

  /// Basis row at a raw predictor value; values outside the training range
  /// are clamped to the boundary and flagged.
  Evaluation eval(double x_raw) const {
    double xs = standardization_.apply(x_raw);
    Evaluation out;
    if (xs < lo_ || xs > hi_) {
      out.clamped = true;
      xs = std::clamp(xs, lo_, hi_);
    }
    out.z = transform_.transpose() * spline::eval_bspline(knots_, xs).value;
    return out;
  }

  int K() const { return K_; }
  double lo() const { return lo_; }
  double hi() const { return hi_; }
  /// Training range in raw units.
  double raw_lo() const { return standardization_.invert(lo_); }
  double raw_hi() const { return standardization_.invert(hi_); }
  const std::vector<double>& interior_knots() const { return interior_; }
  const std::vector<double>& knots() const { return knots_; }
  const Eigen::MatrixXd& transform() const { return transform_; }
  const Eigen::MatrixXd& penalty() const { return omega_; }
  const Standardization& standardization() const { return standardization_; }

 private:
  void init_transform() {
    knots_.clear();
    knots_.insert(knots_.end(), spline::kDegree + 1, lo_);
    knots_.insert(knots_.end(), interior_.begin(), interior_.end());
    knots_.insert(knots_.end(), spline::kDegree + 1, hi_);

    omega_ = spline::penalty_gram(knots_);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(omega_);
    if (eig.info() != Eigen::Success) throw NumericalError("penalty eigendecomposition failed", 0);
    const Eigen::VectorXd& d = eig.eigenvalues();  // ascending
    const Eigen::Index nb = d.size();
    const double cutoff = 1e-10 * d(nb - 1);
    if (!(d(nb - K_) > cutoff)) throw NumericalError("penalty has fewer than K positive eigenvalues", 0);

    transform_.resize(nb, K_);
    for (int k = 0; k < K_; ++k) {
      const Eigen::Index col = nb - 1 - k;  // descending eigenvalue order
      Eigen::VectorXd u = eig.eigenvectors().col(col);
      Eigen::Index arg = 0;
      u.cwiseAbs().maxCoeff(&arg);
      if (u(arg) < 0.0) u = -u;
      transform_.col(k) = u / std::sqrt(d(col));
    }
  }

  int K_ = 0;
  double lo_ = 0.0;
  double hi_ = 0.0;
  std::vector<double> interior_;
  std::vector<double> knots_;
  Eigen::MatrixXd omega_;
  Eigen::MatrixXd transform_;
  Standardization standardization_;
};

inline void to_json(nlohmann::json& j, const Standardization& s) {
  j = nlohmann::json{{"mean", s.mean}, {"sd", s.sd}};
}

inline void from_json(const nlohmann::json& j, Standardization& s) {
  s.mean = j.at("mean").get<double>();
  s.sd = j.at("sd").get<double>();
}

inline void to_json(nlohmann::json& j, const SplineBasis& b) {
  std::vector<std::vector<double>> rows(static_cast<std::size_t>(b.transform().rows()));
  for (Eigen::Index r = 0; r < b.transform().rows(); ++r) {
    for (Eigen::Index c = 0; c < b.transform().cols(); ++c) {
      rows[static_cast<std::size_t>(r)].push_back(b.transform()(r, c));
    }
  }
  j = nlohmann::json{{"K", b.K()},
                     {"interior_knots", b.interior_knots()},
                     {"boundary", {b.lo(), b.hi()}},
                     {"standardization", b.standardization()},
                     {"transform", rows}};
}

inline void from_json(const nlohmann::json& j, SplineBasis& b) {
  const auto boundary = j.at("boundary").get<std::vector<double>>();
  if (boundary.size() != 2) throw DataError("spline boundary must have two entries");
  b = SplineBasis::from_parts(j.at("interior_knots").get<std::vector<double>>(), boundary[0],
                              boundary[1], j.at("standardization").get<Standardization>());
  if (j.contains("transform")) {
    const auto rows = j.at("transform").get<std::vector<std::vector<double>>>();
    for (std::size_t r = 0; r < rows.size(); ++r) {
      for (std::size_t c = 0; c < rows[r].size(); ++c) {
        if (rows[r][c] != b.transform()(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c))) {
          throw DataError("persisted spline transform does not match its knots");
        }
      }
    }
  }
}

}  // namespace countvb
