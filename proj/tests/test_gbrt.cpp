#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include "uqr/gbrt.hpp"

using namespace uqr;

namespace {

struct XY {
  Matrix X;
  std::vector<double> y;
};

// Distinct rows, a few informative features and one noise feature.
XY make_regression(std::size_t n, std::uint64_t seed, std::size_t p = 3) {
  Rng rng(seed);
  XY d{Matrix(n, p), std::vector<double>(n)};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t f = 0; f < p; ++f) d.X(i, f) = rng.uniform(-2, 2);
    d.y[i] = std::sin(d.X(i, 0)) + 0.5 * d.X(i, 1) * d.X(i, 1) + 0.1 * rng.normal();
  }
  return d;
}

BoostingParams params(double lr, std::size_t depth, std::size_t leaves, std::size_t stages,
                      Loss loss = Loss::squared()) {
  BoostingParams p;
  p.learning_rate = lr;
  p.max_depth = depth;
  p.max_leaf_nodes = leaves;
  p.n_estimators = stages;
  p.loss = loss;
  return p;
}

double mean_abs(std::span<const double> a, std::span<const double> b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

}  // namespace

TEST(Pinball, HandExample) {
  std::vector<double> y{0, 10}, pred{5, 5};
  EXPECT_DOUBLE_EQ(pinball_loss(y, pred, 0.9), 2.5);
}

TEST(Pinball, PerfectFitIsZero) {
  std::vector<double> y{1, -2, 3.5};
  EXPECT_EQ(pinball_loss(y, y, 0.3), 0.0);
}

TEST(Pinball, MedianIsHalfMae) {
  Rng rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const auto n = static_cast<std::size_t>(rng.between(1, 50));
    std::vector<double> y(n), p(n);
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = rng.uniform(-10, 10);
      p[i] = rng.uniform(-10, 10);
    }
    EXPECT_NEAR(pinball_loss(y, p, 0.5), 0.5 * mean_abs(y, p), 1e-12);
  }
}

TEST(Pinball, RejectsBadTau) {
  std::vector<double> y{1}, p{1};
  EXPECT_THROW(pinball_loss(y, p, 0.0), ConfigError);
  EXPECT_THROW(pinball_loss(y, p, 1.0), ConfigError);
  EXPECT_THROW(Loss::pinball(1.5), ConfigError);
}

TEST(Quantile, LinearInterpolation) {
  std::vector<double> v{4, 1, 3, 2};
  EXPECT_DOUBLE_EQ(quantile_linear(v, 0.5), 2.5);
  v = {4, 1, 3, 2};
  EXPECT_DOUBLE_EQ(quantile_linear(v, 0.0), 1.0);
  v = {4, 1, 3, 2};
  EXPECT_DOUBLE_EQ(quantile_linear(v, 1.0), 4.0);
}

TEST(Fit, SingleLeafPredictsMean) {
  auto d = make_regression(50, 2);
  auto m = fit(d.X, d.y, params(0.7, 0, 31, 1));
  const double mean = std::accumulate(d.y.begin(), d.y.end(), 0.0) / 50.0;
  for (double v : m.predict(d.X)) EXPECT_NEAR(v, mean, 1e-12);
  EXPECT_EQ(m.trees.at(0).leaf_count(), 1u);
}

TEST(Fit, EmptyEnsemblePredictsBase) {
  GBRTModel m;
  m.base_value = 3.25;
  m.n_features = 2;
  Matrix X(4, 2, 1.0);
  for (double v : m.predict(X)) EXPECT_EQ(v, 3.25);
}

TEST(Fit, SingleLeafPinballConvergesToQuantile) {
  Rng rng(3);
  const std::size_t n = 1000;
  Matrix X(n, 1);
  std::vector<double> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    X(i, 0) = static_cast<double>(i);
    y[i] = rng.uniform();
  }
  auto m = fit(X, y, params(0.1, 0, 31, 500, Loss::pinball(0.9)));
  auto sorted = y;
  std::sort(sorted.begin(), sorted.end());
  const double oracle = sorted[static_cast<std::size_t>(std::ceil(0.9 * n)) - 1];
  for (double v : m.predict(X)) EXPECT_NEAR(v, oracle, 0.01);
}

TEST(Fit, MemorisesTrainingPoints) {
  auto d = make_regression(200, 4);
  auto m = fit(d.X, d.y, params(1.0, kUnbounded, kUnbounded, 1));
  const auto pred = m.predict(d.X);
  for (std::size_t i = 0; i < d.y.size(); ++i) EXPECT_NEAR(pred[i], d.y[i], 1e-12 * (1 + std::abs(d.y[i])));
}

TEST(Fit, PredictionIsAdditiveEnsemble) {
  auto d = make_regression(120, 5);
  auto m = fit(d.X, d.y, params(0.3, 3, 6, 10));
  for (std::size_t i = 0; i < 20; ++i) {
    double s = m.base_value;
    for (const auto& t : m.trees) s += m.params.learning_rate * t.predict(d.X.row(i));
    EXPECT_NEAR(m.predict_row(d.X.row(i)), s, 1e-12);
  }
}

TEST(Fit, BatchOrderInvariance) {
  auto d = make_regression(100, 6);
  auto m = fit(d.X, d.y, params(0.2, 4, 10, 20));
  const auto pred = m.predict(d.X);
  Rng rng(7);
  const auto perm = permutation(100, rng);
  const auto permuted = m.predict(d.X.select_rows(perm));
  for (std::size_t i = 0; i < perm.size(); ++i) EXPECT_EQ(permuted[i], pred[perm[i]]);
}

TEST(Fit, TreesRespectStructuralBounds) {
  auto d = make_regression(300, 8);
  for (std::size_t depth : {std::size_t{1}, std::size_t{2}, std::size_t{5}, kUnbounded})
    for (std::size_t leaves : {2, 3, 7, 24}) {
      auto m = fit(d.X, d.y, params(0.3, depth, leaves, 5));
      for (const auto& t : m.trees) {
        EXPECT_LE(t.leaf_count(), leaves);
        if (depth != kUnbounded) {
          EXPECT_LE(t.depth(), depth);
        }
      }
    }
}

TEST(Fit, LeafBudgetBindsOnRichData) {
  auto d = make_regression(400, 9);
  auto m = fit(d.X, d.y, params(0.1, kUnbounded, 15, 3));
  for (const auto& t : m.trees) EXPECT_EQ(t.leaf_count(), 15u);
}

TEST(Fit, DeterministicTrees) {
  auto d = make_regression(150, 10);
  auto p = params(0.2, 6, 12, 15);
  auto a = fit(d.X, d.y, p), b = fit(d.X, d.y, p);
  ASSERT_EQ(a.trees.size(), b.trees.size());
  for (std::size_t t = 0; t < a.trees.size(); ++t) EXPECT_EQ(a.trees[t].preorder(), b.trees[t].preorder());
}

TEST(Fit, SquaredStageLossNonIncreasing) {
  for (std::uint64_t seed : {11, 12, 13}) {
    auto d = make_regression(250, seed);
    std::vector<double> stage;
    fit(d.X, d.y, params(0.5, 4, 8, 60), &stage);
    ASSERT_EQ(stage.size(), 60u);
    for (std::size_t s = 1; s < stage.size(); ++s) EXPECT_LE(stage[s], stage[s - 1] * (1 + 1e-12));
  }
}

TEST(Fit, TieBreakPrefersLowestFeature) {
  // Two identical columns: the split must land on feature 0.
  Matrix X(6, 2);
  std::vector<double> y{0, 0, 0, 1, 1, 1};
  for (std::size_t i = 0; i < 6; ++i) X(i, 0) = X(i, 1) = static_cast<double>(i);
  auto m = fit(X, y, params(1.0, 1, 2, 1));
  const auto nodes = m.trees[0].preorder();
  EXPECT_EQ(nodes[0].feature, 0);
  EXPECT_DOUBLE_EQ(nodes[0].threshold, 2.5);
}

TEST(Fit, Errors) {
  Matrix X(1, 1);
  std::vector<double> y{1};
  EXPECT_THROW(fit(X, y, BoostingParams{}), DataError);
  Matrix E;
  std::vector<double> none;
  EXPECT_THROW(fit(E, none, BoostingParams{}), DataError);
  auto bad = BoostingParams{};
  bad.learning_rate = 0;
  auto d = make_regression(10, 1);
  EXPECT_THROW(fit(d.X, d.y, bad), ConfigError);
  bad = BoostingParams{};
  bad.max_leaf_nodes = 1;
  EXPECT_THROW(fit(d.X, d.y, bad), ConfigError);
}

TEST(Predict, WidthMismatch) {
  auto d = make_regression(30, 1, 3);
  auto m = fit(d.X, d.y, params(0.1, 2, 4, 2));
  EXPECT_THROW(m.predict(Matrix(2, 4)), DataError);
}

TEST(Model, SaveLoadRoundTripIsBitIdentical) {
  auto d = make_regression(200, 14);
  auto m = fit(d.X, d.y, params(0.137, 5, 9, 25, Loss::pinball(0.95)));
  std::stringstream buf;
  save_model(buf, m);
  auto back = load_model(buf);
  EXPECT_EQ(back.params, m.params);
  EXPECT_EQ(back.predict(d.X), m.predict(d.X));
}

TEST(Model, LoadRejectsGarbage) {
  std::istringstream in("gbrt 2\n");
  EXPECT_THROW(load_model(in), DataError);
  std::istringstream trunc("gbrt 1\n");
  EXPECT_THROW(load_model(trunc), DataError);
}

TEST(Model, PublishedConfigurations) {
  const auto q = published_quantile_params(0.05);
  EXPECT_EQ(q.learning_rate, 0.051);
  EXPECT_EQ(q.max_depth, 20u);
  EXPECT_EQ(q.max_leaf_nodes, 24u);
  EXPECT_EQ(q.n_estimators, 152u);
  EXPECT_TRUE(q.loss.is_pinball());
  const auto m = published_mean_params();
  EXPECT_EQ(m.learning_rate, 0.013);
  EXPECT_EQ(m.max_depth, 26u);
  EXPECT_EQ(m.max_leaf_nodes, 15u);
  EXPECT_EQ(m.n_estimators, 251u);
}

TEST(CV, PerfectPredictorScoresZero) {
  auto d = make_regression(50, 15);
  auto s = evaluate_cv_with(d.X, d.y, 5, 0, Loss::squared(), [&](const Matrix&, std::span<const double>, const Matrix& Xte) {
    std::vector<double> out;
    for (std::size_t i = 0; i < Xte.rows(); ++i)
      for (std::size_t j = 0; j < d.X.rows(); ++j)
        if (std::equal(Xte.row(i).begin(), Xte.row(i).end(), d.X.row(j).begin())) {
          out.push_back(d.y[j]);
          break;
        }
    return out;
  });
  for (std::size_t k = 0; k < 5; ++k) {
    EXPECT_EQ(s.mae[k], 0.0);
    EXPECT_EQ(s.rmse[k], 0.0);
  }
}

TEST(CV, ConstantPredictorArithmetic) {
  std::vector<double> y{0, 1}, c{0.5, 0.5};
  auto f = score_fold(y, c, Loss::squared());
  EXPECT_DOUBLE_EQ(f.mae, 0.5);
  EXPECT_DOUBLE_EQ(f.rmse, 0.5);
}

TEST(CV, StatsConsistentAndRmseDominatesMae) {
  auto d = make_regression(200, 16);
  auto s = evaluate_cv(d.X, d.y, params(0.2, 3, 8, 30), 10);
  ASSERT_EQ(s.mae.size(), 10u);
  double sum = 0, sq = 0;
  for (std::size_t k = 0; k < 10; ++k) {
    EXPECT_GE(s.rmse[k], s.mae[k]);
    sum += s.mae[k];
  }
  const double mean = sum / 10;
  for (double v : s.mae) sq += (v - mean) * (v - mean);
  EXPECT_NEAR(s.mae_stats().mean, mean, 1e-12);
  EXPECT_NEAR(s.mae_stats().std, std::sqrt(sq / 10), 1e-12);
  EXPECT_EQ(s.loss, s.rmse);
}

TEST(CV, TooFewSamples) {
  auto d = make_regression(5, 1);
  EXPECT_THROW(evaluate_cv(d.X, d.y, BoostingParams{}, 10), DataError);
  EXPECT_THROW(random_search_cv(d.X, d.y, SearchSpace{}, 10, 1, Loss::squared(), 0), DataError);
}

TEST(Search, DefaultSpaceMatchesPublishedRanges) {
  SearchSpace s;
  EXPECT_EQ(s.lr_lo, 0.0);
  EXPECT_EQ(s.lr_hi, 1.0);
  EXPECT_EQ(s.depth_lo, 2u);
  EXPECT_EQ(s.depth_hi, 30u);
  EXPECT_EQ(s.leaves_lo, 2u);
  EXPECT_EQ(s.leaves_hi, 50u);
  EXPECT_EQ(s.estimators_lo, 10u);
  EXPECT_EQ(s.estimators_hi, 500u);
}

TEST(Search, SamplesStayInsideSpaceAndHitEndpoints) {
  SearchSpace s;
  s.depth_lo = 2, s.depth_hi = 4;
  Rng rng(17);
  std::set<std::size_t> depths;
  for (int i = 0; i < 500; ++i) {
    auto p = s.sample(rng, Loss::squared(), 0);
    EXPECT_GT(p.learning_rate, 0.0);
    EXPECT_LT(p.learning_rate, 1.0);
    EXPECT_GE(p.max_leaf_nodes, 2u);
    EXPECT_LE(p.max_leaf_nodes, 50u);
    EXPECT_GE(p.n_estimators, 10u);
    EXPECT_LE(p.n_estimators, 500u);
    depths.insert(p.max_depth);
  }
  EXPECT_EQ(depths, (std::set<std::size_t>{2, 3, 4}));
}

TEST(Search, SingleIterationReturnsTheDraw) {
  auto d = make_regression(60, 18);
  SearchSpace s;
  s.estimators_hi = 30;
  auto r = random_search_cv(d.X, d.y, s, 5, 1, Loss::squared(), 19);
  Rng rng(19);
  EXPECT_EQ(r.best, s.sample(rng, Loss::squared(), 19));
  ASSERT_EQ(r.trials.size(), 1u);
}

TEST(Search, CollapsedSpaceEqualsPlainCV) {
  auto d = make_regression(80, 20);
  SearchSpace s;
  s.lr_lo = s.lr_hi = 0.3;
  s.depth_lo = s.depth_hi = 3;
  s.leaves_lo = s.leaves_hi = 5;
  s.estimators_lo = s.estimators_hi = 12;
  auto r = random_search_cv(d.X, d.y, s, 5, 3, Loss::squared(), 21);
  auto p = params(0.3, 3, 5, 12);
  p.seed = 21;
  EXPECT_EQ(r.best, p);
  auto plain = evaluate_cv(d.X, d.y, p, 5);
  EXPECT_EQ(r.score.rmse, plain.rmse);
  EXPECT_EQ(r.score.mae, plain.mae);
}

TEST(Search, BestBeatsMidpoint) {
  auto d = make_regression(150, 22, 2);
  SearchSpace s;
  s.depth_hi = 8;
  s.leaves_hi = 16;
  s.estimators_hi = 60;
  auto r = random_search_cv(d.X, d.y, s, 5, 25, Loss::squared(), 0);
  auto mid = evaluate_cv(d.X, d.y, s.midpoint(Loss::squared(), 0), 5);
  EXPECT_LE(r.score.loss_stats().mean, mid.loss_stats().mean);
  for (const auto& t : r.trials) EXPECT_GE(t.score.loss_stats().mean, r.score.loss_stats().mean);
}
