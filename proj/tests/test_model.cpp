#include <random>
#include <string>
#include <vector>

#include <gtest/gtest.h>
#include <json.hpp>

#include "countvb/model.hpp"

using namespace countvb;

namespace {

std::vector<double> draws(std::size_t n, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> x(n);
  for (auto& v : x) v = u(rng);
  return x;
}

}  // namespace

TEST(AssembleDesign, TwoSmoothsGiveThirtySevenColumns) {
  const auto x1 = draws(500, 1), x2 = draws(500, 2);
  const auto d = assemble_design({x1, x2}, {{0, 17}, {1, 17}});
  EXPECT_EQ(d.n(), 500);
  EXPECT_EQ(d.p(), 3);
  EXPECT_EQ(d.P(), 37);
  EXPECT_EQ(d.r(), 2u);
  EXPECT_EQ(d.block_sizes, (std::vector<int>{17, 17}));
  EXPECT_EQ(d.C.leftCols(3), d.X);
  EXPECT_EQ(d.C.rightCols(34), d.Z);
  for (Eigen::Index i = 0; i < d.n(); ++i) EXPECT_EQ(d.X(i, 0), 1.0);
}

TEST(AssembleDesign, LinearColumnsAreStandardized) {
  std::vector<double> x;
  for (int i = 0; i < 50; ++i) x.push_back(100.0 + 3.0 * i);
  const auto d = assemble_design({x}, {});
  const Eigen::VectorXd col = d.X.col(1);
  EXPECT_NEAR(col.mean(), 0.0, 1e-12);
  EXPECT_NEAR(std::sqrt((col.array() - col.mean()).square().sum() / 49.0), 1.0, 1e-12);
}

TEST(AssembleDesign, GroupingGivesIndicatorBlock) {
  const std::vector<std::string> g = {"b", "a", "c", "a", "b", "c", "c"};
  const auto d = assemble_design({}, {}, g);
  EXPECT_EQ(d.block_sizes, (std::vector<int>{3}));
  EXPECT_EQ(d.Z.rows(), 7);
  EXPECT_EQ(d.Z.cols(), 3);
  const std::vector<std::string>& levels = d.map.group_levels();
  for (Eigen::Index i = 0; i < 7; ++i) {
    EXPECT_EQ(d.Z.row(i).sum(), 1.0);
    for (Eigen::Index k = 0; k < 3; ++k) {
      EXPECT_EQ(d.Z(i, k), levels[static_cast<std::size_t>(k)] == g[static_cast<std::size_t>(i)] ? 1.0 : 0.0);
    }
  }
}

TEST(AssembleDesign, IdenticalInputsAreBitIdentical) {
  const auto x1 = draws(200, 3), x2 = draws(200, 4);
  std::vector<std::string> groups;
  for (int i = 0; i < 200; ++i) groups.push_back(i % 3 ? "u" : "v");
  const auto a = assemble_design({x1, x2}, {{0, 9}}, groups);
  const auto b = assemble_design({x1, x2}, {{0, 9}}, groups);
  EXPECT_EQ(a.C, b.C);
  EXPECT_EQ(a.block_sizes, b.block_sizes);
}

TEST(AssembleDesign, RejectsLengthMismatchAndSingleLevelGroups) {
  EXPECT_THROW(assemble_design({draws(100, 1), draws(99, 2)}, {}), DataError);
  EXPECT_THROW(assemble_design({draws(5, 1)}, {}, std::vector<std::string>(5, "only")), DataError);
  EXPECT_THROW(assemble_design({draws(100, 1)}, {}, std::vector<std::string>(4, "a")), DataError);
  EXPECT_THROW(assemble_design({draws(100, 1)}, {{3, 8}}), DataError);
  EXPECT_THROW(assemble_design({draws(100, 1)}, {{0, 1}}), ParameterError);
}

TEST(AssembleDesign, BlockRangesMatchHandBuiltIndexMap) {
  std::vector<std::string> groups;
  for (int i = 0; i < 300; ++i) groups.push_back("g" + std::to_string(i % 4));
  const auto d = assemble_design({draws(300, 5), draws(300, 6), draws(300, 7)}, {{2, 6}, {0, 11}}, groups);
  // columns: intercept, 3 linear, 6 for the first smooth, 11 for the second, 4 group indicators
  std::vector<int> owner(static_cast<std::size_t>(d.P()), -1);
  int col = 4;
  for (int k = 0; k < 6; ++k) owner[col++] = 0;
  for (int k = 0; k < 11; ++k) owner[col++] = 1;
  for (int k = 0; k < 4; ++k) owner[col++] = 2;
  ASSERT_EQ(col, d.P());
  for (std::size_t l = 0; l < d.r(); ++l) {
    const auto b = d.block(l);
    EXPECT_EQ(b.size, d.block_sizes[l]);
    for (Eigen::Index j = 0; j < d.P(); ++j) {
      const bool inside = j >= b.offset && j < b.offset + b.size;
      EXPECT_EQ(inside, owner[static_cast<std::size_t>(j)] == static_cast<int>(l));
    }
  }
}

TEST(AssembleDesign, DesignMapReproducesRows) {
  const auto x1 = draws(120, 8), x2 = draws(120, 9);
  std::vector<std::string> groups;
  for (int i = 0; i < 120; ++i) groups.push_back(i % 2 ? "odd" : "even");
  const auto d = assemble_design({x1, x2}, {{1, 7}}, groups);
  for (Eigen::Index i = 0; i < d.n(); i += 11) {
    const double rec[2] = {x1[static_cast<std::size_t>(i)], x2[static_cast<std::size_t>(i)]};
    const auto row = d.map.row(rec, &groups[static_cast<std::size_t>(i)]);
    EXPECT_FALSE(row.unknown_group);
    EXPECT_LT((row.c - d.C.row(i).transpose()).cwiseAbs().maxCoeff(), 1e-12);
  }
  const double rec[2] = {0.5, 0.5};
  const std::string unseen = "new";
  EXPECT_TRUE(d.map.row(rec, &unseen).unknown_group);
}

TEST(Hyperparameters, DefaultsForTwoBlocks) {
  const auto h = default_hyperparameters(2);
  EXPECT_EQ(h.sigma_beta, 1e5);
  EXPECT_EQ(h.A, (std::vector<double>{1e5, 1e5}));
  EXPECT_EQ(h.kappa_min, 0.01);
  EXPECT_EQ(h.kappa_max, 100.0);
  EXPECT_NO_THROW(h.validate(2));
}

TEST(Hyperparameters, OneBlockHasOneScale) {
  EXPECT_EQ(default_hyperparameters(1).A.size(), 1u);
}

TEST(Hyperparameters, KappaOrderingIsValidated) {
  auto h = default_hyperparameters(1);
  h.kappa_max = 50.0;
  EXPECT_NO_THROW(h.validate(1));
  h.kappa_min = 50.0;
  EXPECT_THROW(h.validate(1), ParameterError);
  h.kappa_min = 60.0;
  EXPECT_THROW(h.validate(1), ParameterError);
  auto g = default_hyperparameters(2);
  EXPECT_THROW(g.validate(3), ParameterError);
  g.A[0] = 0.0;
  EXPECT_THROW(g.validate(2), ParameterError);
}

TEST(ModelSpec, JsonConfigParsesAndRoundTrips) {
  const auto j = nlohmann::json::parse(R"({
    "response": "count", "smooth": [{"column": "age", "K": 12}, {"column": "dose"}],
    "linear": ["year"], "group": "site", "family": "negbin",
    "hyper": {"sigma_beta": 100.0, "A": 50.0, "kappa_max": 40.0}})");
  const auto spec = j.get<ModelSpec>();
  EXPECT_EQ(spec.response, "count");
  EXPECT_EQ(spec.family, Family::NegativeBinomial);
  EXPECT_EQ(spec.predictor_columns(), (std::vector<std::string>{"age", "dose", "year"}));
  EXPECT_EQ(spec.smooth[1].K, 17);
  const auto h = spec.hyperparameters();
  EXPECT_EQ(h.A, (std::vector<double>{50.0, 50.0, 50.0}));
  EXPECT_EQ(h.kappa_max, 40.0);
  EXPECT_EQ(h.sigma_beta, 100.0);
  const nlohmann::json back = spec;
  const auto again = back.get<ModelSpec>();
  EXPECT_EQ(again.predictor_columns(), spec.predictor_columns());
  EXPECT_EQ(*again.group, "site");
  EXPECT_THROW(nlohmann::json::parse(R"({"smooth": [{"column": "x", "K": 1}]})").get<ModelSpec>(), ParameterError);
  EXPECT_THROW(parse_family("gaussian"), ParameterError);
}
