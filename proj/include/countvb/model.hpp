#pragma once

// Design assembly for Poisson and Negative Binomial additive mixed models.
//
//   C = [X Z],  X = [1, standardized predictors],
//   Z = [Z_1 ... Z_r] with one O'Sullivan block per smooth term and an
//       optional 0/1 indicator block for a grouped random intercept.
//
// Each Z block l carries its own variance sigma_l^2 with a Half-Cauchy(A_l)
// prior on sigma_l.

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "countvb/errors.hpp"
#include "countvb/spline_basis.hpp"

namespace countvb {

enum class Family { Poisson, NegativeBinomial };

inline std::string to_string(Family f) {
  return f == Family::Poisson ? "poisson" : "negbin";
}

inline Family parse_family(const std::string& name) {
  if (name == "poisson") return Family::Poisson;
  if (name == "negbin" || name == "negative-binomial" || name == "negativebinomial") {
    return Family::NegativeBinomial;
  }
  throw ParameterError("unknown family '" + name + "' (expected poisson or negbin)");
}

struct Hyperparameters {
  double sigma_beta = 1e5;
  std::vector<double> A;
  double kappa_min = 0.01;
  double kappa_max = 100.0;

  void validate(std::size_t r) const {
    if (!(sigma_beta > 0.0)) throw ParameterError("sigma_beta must be positive");
    if (A.size() != r) throw ParameterError("need one A per variance block");
    for (double a : A) {
      if (!(a > 0.0)) throw ParameterError("A must be positive");
    }
    if (!(kappa_min > 0.0)) throw ParameterError("kappa_min must be positive");
    if (!(kappa_min < kappa_max)) throw ParameterError("kappa_min must be below kappa_max");
  }
};

/// Noninformative defaults for standardized predictors.
inline Hyperparameters default_hyperparameters(std::size_t r) {
  Hyperparameters h;
  h.sigma_beta = 1e5;
  h.A.assign(r, 1e5);
  h.kappa_min = 1.0 / 100.0;
  h.kappa_max = 100.0;
  return h;
}

struct SmoothTerm {
  std::size_t predictor = 0;
  int K = 17;
};

struct BlockRange {
  Eigen::Index offset = 0;
  Eigen::Index size = 0;
};

/// Maps a raw record (predictor values in original units, optional group
/// label) to a row of C. Retains the training standardizations and bases.
class DesignMap {
 public:
  struct Row {
    Eigen::VectorXd c;
    bool clamped = false;       // a smooth predictor fell outside its training range
    bool unknown_group = false;  // label not seen at assembly; c is not usable
  };

  DesignMap() = default;
  DesignMap(std::vector<Standardization> linear,
            std::vector<std::pair<std::size_t, SplineBasis>> smooths,
            std::vector<std::string> group_levels, bool has_group)
      : linear_(std::move(linear)),
        smooths_(std::move(smooths)),
        levels_(std::move(group_levels)),
        has_group_(has_group) {}

  Eigen::Index p() const { return static_cast<Eigen::Index>(linear_.size()) + 1; }

  Eigen::Index P() const {
    Eigen::Index total = p();
    for (const auto& s : smooths_) total += s.second.K();
    if (has_group_) total += static_cast<Eigen::Index>(levels_.size());
    return total;
  }

  Row row(std::span<const double> predictors, const std::string* group = nullptr) const {
    if (predictors.size() != linear_.size()) throw DataError("record has the wrong number of predictors");
    Row out;
    out.c.resize(P());
    Eigen::Index col = 0;
    out.c(col++) = 1.0;
    for (std::size_t j = 0; j < linear_.size(); ++j) out.c(col++) = linear_[j].apply(predictors[j]);
    for (const auto& [pred, basis] : smooths_) {
      const auto ev = basis.eval(predictors[pred]);
      out.c.segment(col, basis.K()) = ev.z;
      out.clamped = out.clamped || ev.clamped;
      col += basis.K();
    }
    if (has_group_) {
      out.c.segment(col, static_cast<Eigen::Index>(levels_.size())).setZero();
      const auto level = group ? level_index(*group) : std::nullopt;
      if (level) {
        out.c(col + static_cast<Eigen::Index>(*level)) = 1.0;
      } else {
        out.unknown_group = true;
      }
    }
    return out;
  }

  std::optional<std::size_t> level_index(const std::string& label) const {
    for (std::size_t i = 0; i < levels_.size(); ++i) {
      if (levels_[i] == label) return i;
    }
    return std::nullopt;
  }

  const std::vector<Standardization>& linear() const { return linear_; }
  const std::vector<std::pair<std::size_t, SplineBasis>>& smooths() const { return smooths_; }
  const std::vector<std::string>& group_levels() const { return levels_; }
  bool has_group() const { return has_group_; }

 private:
  std::vector<Standardization> linear_;
  std::vector<std::pair<std::size_t, SplineBasis>> smooths_;
  std::vector<std::string> levels_;
  bool has_group_ = false;
};

struct DesignBlocks {
  Eigen::MatrixXd X;
  Eigen::MatrixXd Z;
  Eigen::MatrixXd C;
  std::vector<int> block_sizes;
  DesignMap map;

  Eigen::Index n() const { return C.rows(); }
  Eigen::Index p() const { return X.cols(); }
  Eigen::Index P() const { return C.cols(); }
  std::size_t r() const { return block_sizes.size(); }

  /// Columns of C (and entries of the mean vector) belonging to u_l.
  BlockRange block(std::size_t l) const {
    Eigen::Index offset = p();
    for (std::size_t j = 0; j < l; ++j) offset += block_sizes[j];
    return {offset, block_sizes.at(l)};
  }
};

/// Builds X, Z and C from raw predictors. Every predictor gets a
/// standardized linear column; `smooths` adds a spline block for the named
/// predictor; `groups` adds a random-intercept indicator block.
inline DesignBlocks assemble_design(const std::vector<std::vector<double>>& predictors,
                                    const std::vector<SmoothTerm>& smooths,
                                    const std::optional<std::vector<std::string>>& groups = std::nullopt) {
  std::optional<std::size_t> n;
  for (const auto& x : predictors) {
    if (n && *n != x.size()) throw DataError("predictor lengths differ");
    n = x.size();
  }
  if (groups) {
    if (n && *n != groups->size()) throw DataError("group vector length differs from predictors");
    n = groups->size();
  }
  if (!n || *n == 0) throw DataError("design needs at least one observation");

  std::vector<Standardization> linear;
  linear.reserve(predictors.size());
  for (const auto& x : predictors) linear.push_back(Standardization::fit(x));

  std::vector<std::pair<std::size_t, SplineBasis>> bases;
  std::vector<int> block_sizes;
  for (const auto& term : smooths) {
    if (term.predictor >= predictors.size()) throw DataError("smooth term names a missing predictor");
    if (term.K < 2) throw ParameterError("smooth terms need K >= 2");
    bases.emplace_back(term.predictor, SplineBasis::build(predictors[term.predictor], term.K));
    block_sizes.push_back(term.K);
  }

  std::vector<std::string> levels;
  if (groups) {
    std::map<std::string, int> seen;
    for (const auto& g : *groups) seen.emplace(g, 0);
    if (seen.size() < 2) throw DataError("grouping needs at least two levels");
    for (const auto& [label, unused] : seen) levels.push_back(label);
    block_sizes.push_back(static_cast<int>(levels.size()));
  }

  DesignBlocks d;
  d.map = DesignMap(std::move(linear), std::move(bases), std::move(levels), groups.has_value());
  d.block_sizes = std::move(block_sizes);

  const auto rows = static_cast<Eigen::Index>(*n);
  d.C.resize(rows, d.map.P());
  std::vector<double> record(predictors.size());
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < predictors.size(); ++j) record[j] = predictors[j][static_cast<std::size_t>(i)];
    const std::string* label = groups ? &(*groups)[static_cast<std::size_t>(i)] : nullptr;
    d.C.row(i) = d.map.row(record, label).c;
  }
  d.X = d.C.leftCols(d.map.p());
  d.Z = d.C.rightCols(d.C.cols() - d.map.p());
  return d;
}

/// Declarative model description, as read from a JSON config.
struct ModelSpec {
  struct Smooth {
    std::string column;
    int K = 17;
  };

  std::string response = "y";
  std::vector<std::string> linear;  // predictors entering only linearly
  std::vector<Smooth> smooth;       // predictors with a linear term plus a spline block
  std::optional<std::string> group;
  Family family = Family::Poisson;
  std::optional<double> sigma_beta;
  std::optional<std::vector<double>> A;
  std::optional<double> kappa_min;
  std::optional<double> kappa_max;

  /// All predictor columns in design order: smooth columns first, then linear-only.
  std::vector<std::string> predictor_columns() const {
    std::vector<std::string> cols;
    for (const auto& s : smooth) cols.push_back(s.column);
    for (const auto& c : linear) cols.push_back(c);
    return cols;
  }

  std::vector<SmoothTerm> smooth_terms() const {
    std::vector<SmoothTerm> terms;
    for (std::size_t i = 0; i < smooth.size(); ++i) terms.push_back({i, smooth[i].K});
    return terms;
  }

  std::size_t num_blocks() const { return smooth.size() + (group ? 1 : 0); }

  Hyperparameters hyperparameters() const {
    auto h = default_hyperparameters(num_blocks());
    if (sigma_beta) h.sigma_beta = *sigma_beta;
    if (A) {
      if (A->size() == 1) {
        h.A.assign(num_blocks(), A->front());
      } else {
        h.A = *A;
      }
    }
    if (kappa_min) h.kappa_min = *kappa_min;
    if (kappa_max) h.kappa_max = *kappa_max;
    h.validate(num_blocks());
    return h;
  }
};

inline void from_json(const nlohmann::json& j, ModelSpec& m) {
  m = ModelSpec{};
  if (j.contains("response")) m.response = j.at("response").get<std::string>();
  if (j.contains("linear")) m.linear = j.at("linear").get<std::vector<std::string>>();
  if (j.contains("smooth")) {
    for (const auto& s : j.at("smooth")) {
      ModelSpec::Smooth term;
      term.column = s.at("column").get<std::string>();
      if (s.contains("K")) term.K = s.at("K").get<int>();
      if (term.K < 2) throw ParameterError("smooth term '" + term.column + "' needs K >= 2");
      m.smooth.push_back(term);
    }
  }
  if (j.contains("group") && !j.at("group").is_null()) m.group = j.at("group").get<std::string>();
  if (j.contains("family")) m.family = parse_family(j.at("family").get<std::string>());
  if (j.contains("hyper")) {
    const auto& h = j.at("hyper");
    if (h.contains("sigma_beta")) m.sigma_beta = h.at("sigma_beta").get<double>();
    if (h.contains("A")) {
      m.A = h.at("A").is_array() ? h.at("A").get<std::vector<double>>()
                                 : std::vector<double>{h.at("A").get<double>()};
    }
    if (h.contains("kappa_min")) m.kappa_min = h.at("kappa_min").get<double>();
    if (h.contains("kappa_max")) m.kappa_max = h.at("kappa_max").get<double>();
  }
}

inline void to_json(nlohmann::json& j, const ModelSpec& m) {
  j = nlohmann::json{{"response", m.response}, {"linear", m.linear}, {"family", to_string(m.family)}};
  j["smooth"] = nlohmann::json::array();
  for (const auto& s : m.smooth) j["smooth"].push_back({{"column", s.column}, {"K", s.K}});
  j["group"] = m.group ? nlohmann::json(*m.group) : nlohmann::json(nullptr);
}

}  // namespace countvb
