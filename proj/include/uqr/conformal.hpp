#pragma once

// Prediction-interval estimators over any regressor factory.
//
// Each estimator is split in two: a calibration step that fits the base
// models and computes conformity scores once, and an `at(alpha)` step that
// turns them into intervals. Sweeping alpha therefore reuses every fitted
// model.
//
// Quantile convention: q_hi(v, alpha) is the k-th smallest element of v
// with k = ceil((1 - alpha)(n + 1)), and +inf when k > n;
// q_lo(v, alpha) = -q_hi(-v, alpha), i.e. the k-th largest element.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "uqr/core.hpp"
#include "uqr/data.hpp"
#include "uqr/interval.hpp"
#include "uqr/rng.hpp"

namespace uqr {

template <class M>
concept PointModel = requires(const M& m, const Matrix& X) {
  { m.predict(X) } -> std::convertible_to<std::vector<double>>;
};

template <class F>
concept RegressorFactory = requires(const F& f, const Matrix& X, std::span<const double> y) {
  { f(X, y) } -> PointModel;
};

template <class F>
concept QuantileRegressorFactory = requires(const F& f, const Matrix& X, std::span<const double> y, double tau) {
  { f(X, y, tau) } -> PointModel;
};

enum class Aggregation { mean, median };

struct IntervalConfig {
  double alpha = 0.1;
  Method method = Method::naive;
  std::size_t K = 10;  // folds for the CV family, resamples for jackknife+ab
  Aggregation aggregation = Aggregation::mean;
  std::uint64_t seed = 0;
  std::size_t max_resample_attempts = 100;

  void validate() const {
    if (!(alpha > 0 && alpha < 1)) throw ConfigError("alpha: must lie inside (0, 1)");
    if (K < 2) throw ConfigError("K: must be at least 2");
    if (max_resample_attempts < 1) throw ConfigError("max_resample_attempts: must be at least 1");
  }
};

// ---------------------------------------------------------------------------
// Empirical quantiles

/// k = ceil((1 - alpha)(n + 1)), guarding against representation error in
/// alpha (e.g. 0.93 * 100 evaluating to 93.00000000000001).
inline std::size_t quantile_rank(std::size_t n, double alpha) {
  const double x = (1.0 - alpha) * static_cast<double>(n + 1);
  auto k = static_cast<std::size_t>(std::ceil(x - 1e-9 * std::max(1.0, x)));
  return std::max<std::size_t>(k, 1);
}

/// k-th smallest (1-based) of v, +inf if k > |v|. Reorders v.
inline double kth_smallest_or_inf(std::vector<double>& v, std::size_t k) {
  if (k > v.size()) return kInf;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k - 1), v.end());
  return v[k - 1];
}

/// k-th largest (1-based) of v, -inf if k > |v|. Reorders v.
inline double kth_largest_or_inf(std::vector<double>& v, std::size_t k) {
  if (k > v.size()) return -kInf;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k - 1), v.end(), std::greater<>());
  return v[k - 1];
}

inline double empirical_quantile_hi(std::span<const double> v, double alpha) {
  if (v.empty()) throw DataError("empirical quantile of an empty vector");
  std::vector<double> tmp(v.begin(), v.end());
  return kth_smallest_or_inf(tmp, quantile_rank(v.size(), alpha));
}

inline double empirical_quantile_lo(std::span<const double> v, double alpha) {
  if (v.empty()) throw DataError("empirical quantile of an empty vector");
  std::vector<double> tmp(v.begin(), v.end());
  return kth_largest_or_inf(tmp, quantile_rank(v.size(), alpha));
}

enum class ScoreKind { absolute_residual, cqr_signed };

struct ConformityScores {
  std::vector<double> scores;
  ScoreKind kind = ScoreKind::absolute_residual;
};

inline ConformityScores absolute_residuals(std::span<const double> y, std::span<const double> pred) {
  if (y.size() != pred.size()) throw DataError("conformity scores: length mismatch");
  ConformityScores s;
  s.scores.resize(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) s.scores[i] = std::abs(y[i] - pred[i]);
  return s;
}

namespace detail {

inline double aggregate(std::vector<double>& v, Aggregation agg) {
  if (agg == Aggregation::mean) {
    double s = 0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  }
  const auto n = v.size();
  const auto mid = v.begin() + static_cast<std::ptrdiff_t>(n / 2);
  std::nth_element(v.begin(), mid, v.end());
  if (n % 2 == 1) return *mid;
  return 0.5 * (*mid + *std::max_element(v.begin(), mid));
}

inline void check_xy(const Matrix& X, std::span<const double> y, const char* what) {
  if (y.empty()) throw DataError(std::string(what) + ": empty training set");
  if (X.rows() != y.size()) throw DataError(std::string(what) + ": feature rows do not match targets");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Naive: full-data model, training residual quantile.

struct NaiveCalibration {
  std::vector<double> test_pred;
  ConformityScores scores;

  IntervalBatch at(double alpha) const {
    const double q = empirical_quantile_hi(scores.scores, alpha);
    IntervalBatch b;
    b.alpha = alpha;
    b.method = Method::naive;
    b.point = test_pred;
    b.lower.resize(test_pred.size());
    b.upper.resize(test_pred.size());
    for (std::size_t j = 0; j < test_pred.size(); ++j) {
      b.lower[j] = test_pred[j] - q;
      b.upper[j] = test_pred[j] + q;
    }
    return b;
  }
};

template <PointModel M>
NaiveCalibration calibrate_naive_model(const M& model, const Matrix& X, std::span<const double> y,
                                       const Matrix& test_X) {
  detail::check_xy(X, y, "naive");
  NaiveCalibration c;
  const std::vector<double> fitted = model.predict(X);
  c.scores = absolute_residuals(y, fitted);
  c.test_pred = model.predict(test_X);
  return c;
}

template <RegressorFactory F>
NaiveCalibration calibrate_naive(const Matrix& X, std::span<const double> y, const Matrix& test_X, const F& factory) {
  detail::check_xy(X, y, "naive");
  return calibrate_naive_model(factory(X, y), X, y, test_X);
}

template <RegressorFactory F>
IntervalBatch naive(const Matrix& X, std::span<const double> y, const Matrix& test_X, const F& factory,
                    const IntervalConfig& cfg) {
  cfg.validate();
  return calibrate_naive(X, y, test_X, factory).at(cfg.alpha);
}

// ---------------------------------------------------------------------------
// Jackknife+-after-bootstrap

struct JackknifeABCalibration {
  std::vector<std::vector<std::size_t>> resamples;  // K bootstrap index draws
  std::vector<std::vector<std::size_t>> oob;        // per training i, models with i not in the resample
  std::vector<std::vector<double>> test_pred;       // per model, predictions on the test set
  std::vector<double> loo_pred;                     // aggregated out-of-bag prediction at X_i
  ConformityScores scores;
  Aggregation aggregation = Aggregation::mean;
  std::size_t attempts = 1;

  std::size_t n_train() const { return oob.size(); }
  std::size_t n_test() const { return test_pred.empty() ? 0 : test_pred.front().size(); }

  /// Distinct out-of-bag model sets and each sample's set; samples sharing
  /// a set share the aggregate.
  std::vector<std::vector<std::size_t>> oob_groups;
  std::vector<std::size_t> group_of;

  void index_groups() {
    std::map<std::vector<std::size_t>, std::size_t> ids;
    oob_groups.clear();
    group_of.resize(oob.size());
    for (std::size_t i = 0; i < oob.size(); ++i) {
      auto [it, fresh] = ids.emplace(oob[i], oob_groups.size());
      if (fresh) oob_groups.push_back(oob[i]);
      group_of[i] = it->second;
    }
  }

  /// mu_{-i}(x_j) for every training i.
  std::vector<double> loo_at_test(std::size_t j) const {
    std::vector<double> per_group(oob_groups.size());
    std::vector<double> buf;
    for (std::size_t g = 0; g < oob_groups.size(); ++g) {
      buf.clear();
      for (auto k : oob_groups[g]) buf.push_back(test_pred[k][j]);
      per_group[g] = detail::aggregate(buf, aggregation);
    }
    std::vector<double> out(n_train());
    for (std::size_t i = 0; i < n_train(); ++i) out[i] = per_group[group_of[i]];
    return out;
  }

  IntervalBatch at(double alpha) const {
    IntervalBatch b;
    b.alpha = alpha;
    b.method = Method::jackknife_plus_ab;
    const auto m = n_test(), n = n_train();
    const auto k = quantile_rank(n, alpha);
    b.point.resize(m);
    b.lower.resize(m);
    b.upper.resize(m);
    std::vector<double> lo(n), hi(n);
    for (std::size_t j = 0; j < m; ++j) {
      const auto mu = loo_at_test(j);
      double s = 0;
      for (std::size_t i = 0; i < n; ++i) {
        lo[i] = mu[i] - scores.scores[i];
        hi[i] = mu[i] + scores.scores[i];
        s += mu[i];
      }
      b.point[j] = s / static_cast<double>(n);
      b.lower[j] = kth_largest_or_inf(lo, k);
      b.upper[j] = kth_smallest_or_inf(hi, k);
    }
    return b;
  }
};

/// Draws K bootstrap resamples, redrawing the whole set until every index
/// is out-of-bag for at least one resample.
inline std::pair<std::vector<std::vector<std::size_t>>, std::size_t> draw_bootstraps(std::size_t n, std::size_t K,
                                                                                    Rng& rng,
                                                                                    std::size_t max_attempts) {
  for (std::size_t attempt = 1; attempt <= max_attempts; ++attempt) {
    std::vector<std::vector<std::size_t>> out(K, std::vector<std::size_t>(n));
    std::vector<std::size_t> in_count(n, 0);
    for (auto& b : out) {
      std::vector<char> seen(n, 0);
      for (auto& i : b) {
        i = static_cast<std::size_t>(rng.below(n));
        if (!seen[i]) {
          seen[i] = 1;
          ++in_count[i];
        }
      }
    }
    if (std::none_of(in_count.begin(), in_count.end(), [&](auto c) { return c == K; })) return {out, attempt};
  }
  throw NumericError("jackknife+ab: some training index was in every one of the " + std::to_string(K) +
                     " resamples after " + std::to_string(max_attempts) +
                     " redraws; increase K (roughly K > 2.2 * ln(n) for n samples)");
}

template <RegressorFactory F>
JackknifeABCalibration calibrate_jackknife_plus_ab(const Matrix& X, std::span<const double> y, const Matrix& test_X,
                                                   const F& factory, const IntervalConfig& cfg) {
  cfg.validate();
  detail::check_xy(X, y, "jackknife+ab");
  const auto n = y.size();
  Rng rng(cfg.seed);
  JackknifeABCalibration c;
  c.aggregation = cfg.aggregation;
  std::tie(c.resamples, c.attempts) = draw_bootstraps(n, cfg.K, rng, cfg.max_resample_attempts);
  c.oob.assign(n, {});
  std::vector<std::vector<double>> train_pred;
  for (std::size_t k = 0; k < cfg.K; ++k) {
    const auto& b = c.resamples[k];
    const auto yb = select(y, b);
    const auto model = factory(X.select_rows(b), std::span<const double>(yb));
    train_pred.push_back(model.predict(X));
    c.test_pred.push_back(model.predict(test_X));
    std::vector<char> in(n, 0);
    for (auto i : b) in[i] = 1;
    for (std::size_t i = 0; i < n; ++i)
      if (!in[i]) c.oob[i].push_back(k);
  }
  c.loo_pred.resize(n);
  std::vector<double> buf;
  for (std::size_t i = 0; i < n; ++i) {
    buf.clear();
    for (auto k : c.oob[i]) buf.push_back(train_pred[k][i]);
    c.loo_pred[i] = detail::aggregate(buf, cfg.aggregation);
  }
  c.scores = absolute_residuals(y, c.loo_pred);
  c.index_groups();
  return c;
}

template <RegressorFactory F>
IntervalBatch jackknife_plus_ab(const Matrix& X, std::span<const double> y, const Matrix& test_X, const F& factory,
                                const IntervalConfig& cfg) {
  return calibrate_jackknife_plus_ab(X, y, test_X, factory, cfg).at(cfg.alpha);
}

// ---------------------------------------------------------------------------
// K-fold family: CV, CV+, CV-minmax

struct CVCalibration {
  std::vector<std::vector<std::size_t>> folds;
  std::vector<std::size_t> fold_of;              // per training i
  std::vector<std::vector<double>> fold_test_pred;  // per fold model, on the test set
  std::vector<double> full_test_pred;            // model fitted on all training data
  ConformityScores scores;                       // |Y_i - mu_{-S_k(i)}(X_i)|

  std::size_t n_test() const { return full_test_pred.size(); }

  /// Mean over i of mu_{-S_k(i)}(x_j), i.e. fold predictions weighted by fold size.
  double oos_point(std::size_t j) const {
    double s = 0;
    for (std::size_t k = 0; k < folds.size(); ++k) s += static_cast<double>(folds[k].size()) * fold_test_pred[k][j];
    return s / static_cast<double>(fold_of.size());
  }

  IntervalBatch at(Method method, double alpha) const {
    IntervalBatch b;
    b.alpha = alpha;
    b.method = method;
    const auto m = n_test(), n = fold_of.size();
    b.point.resize(m);
    b.lower.resize(m);
    b.upper.resize(m);
    switch (method) {
      case Method::cv: {
        const double q = empirical_quantile_hi(scores.scores, alpha);
        for (std::size_t j = 0; j < m; ++j) {
          b.point[j] = full_test_pred[j];
          b.lower[j] = full_test_pred[j] - q;
          b.upper[j] = full_test_pred[j] + q;
        }
        break;
      }
      case Method::cv_plus: {
        const auto k = quantile_rank(n, alpha);
        std::vector<double> lo(n), hi(n);
        for (std::size_t j = 0; j < m; ++j) {
          for (std::size_t i = 0; i < n; ++i) {
            const double mu = fold_test_pred[fold_of[i]][j];
            lo[i] = mu - scores.scores[i];
            hi[i] = mu + scores.scores[i];
          }
          b.point[j] = oos_point(j);
          b.lower[j] = kth_largest_or_inf(lo, k);
          b.upper[j] = kth_smallest_or_inf(hi, k);
        }
        break;
      }
      case Method::cv_minmax: {
        const double q = empirical_quantile_hi(scores.scores, alpha);
        for (std::size_t j = 0; j < m; ++j) {
          double mn = kInf, mx = -kInf;
          for (const auto& p : fold_test_pred) {
            mn = std::min(mn, p[j]);
            mx = std::max(mx, p[j]);
          }
          b.point[j] = oos_point(j);
          b.lower[j] = mn - q;
          b.upper[j] = mx + q;
        }
        break;
      }
      default: throw ConfigError("CV calibration cannot produce method '" + std::string(method_name(method)) + "'");
    }
    return b;
  }
};

template <RegressorFactory F>
CVCalibration calibrate_cv(const Matrix& X, std::span<const double> y, const Matrix& test_X, const F& factory,
                           const IntervalConfig& cfg) {
  cfg.validate();
  detail::check_xy(X, y, "cv");
  const auto n = y.size();
  if (n < cfg.K) throw DataError("cv: " + std::to_string(n) + " samples cannot fill " + std::to_string(cfg.K) + " folds");
  CVCalibration c;
  c.folds = kfold(n, cfg.K, cfg.seed);
  c.fold_of.resize(n);
  std::vector<double> oof(n);
  for (std::size_t k = 0; k < c.folds.size(); ++k) {
    const auto& held = c.folds[k];
    const auto train = complement(n, held);
    const auto ytr = select(y, train);
    const auto model = factory(X.select_rows(train), std::span<const double>(ytr));
    const std::vector<double> pred = model.predict(X.select_rows(held));
    for (std::size_t t = 0; t < held.size(); ++t) {
      c.fold_of[held[t]] = k;
      oof[held[t]] = pred[t];
    }
    c.fold_test_pred.push_back(model.predict(test_X));
  }
  c.scores = absolute_residuals(y, oof);
  c.full_test_pred = factory(X, y).predict(test_X);
  return c;
}

template <RegressorFactory F>
IntervalBatch cv_family(const Matrix& X, std::span<const double> y, const Matrix& test_X, const F& factory,
                        const IntervalConfig& cfg) {
  return calibrate_cv(X, y, test_X, factory, cfg).at(cfg.method, cfg.alpha);
}

// ---------------------------------------------------------------------------
// Conformalised quantile regression (split calibration)

struct CQRCalibration {
  double fitted_alpha = 0.1;          // quantile models sit at alpha/2 and 1 - alpha/2
  std::vector<double> cal_lo, cal_hi;   // on the calibration set, after uncrossing
  std::vector<double> test_lo, test_hi; // on the test set, after uncrossing
  ConformityScores scores;
  std::size_t crossed = 0;             // predictions swapped because lo > hi

  /// Recalibrates the fixed quantile models at `alpha`. A negative
  /// correction wider than the band collapses it to its midpoint.
  IntervalBatch at(double alpha) const {
    const double q = empirical_quantile_hi(scores.scores, alpha);
    IntervalBatch b;
    b.alpha = alpha;
    b.method = Method::cqr;
    const auto m = test_lo.size();
    b.point.resize(m);
    b.lower.resize(m);
    b.upper.resize(m);
    for (std::size_t j = 0; j < m; ++j) {
      b.point[j] = 0.5 * (test_lo[j] + test_hi[j]);
      double lo = test_lo[j] - q, hi = test_hi[j] + q;
      if (lo > hi) lo = hi = b.point[j];
      b.lower[j] = lo;
      b.upper[j] = hi;
    }
    return b;
  }
};

inline std::size_t uncross(std::vector<double>& lo, std::vector<double>& hi) {
  std::size_t swapped = 0;
  for (std::size_t i = 0; i < lo.size(); ++i)
    if (lo[i] > hi[i]) {
      std::swap(lo[i], hi[i]);
      ++swapped;
    }
  return swapped;
}

inline ConformityScores cqr_scores(std::span<const double> y, std::span<const double> lo, std::span<const double> hi) {
  ConformityScores s;
  s.kind = ScoreKind::cqr_signed;
  s.scores.resize(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) s.scores[i] = std::max(lo[i] - y[i], y[i] - hi[i]);
  return s;
}

/// Calibrates from already-fitted lower/upper quantile models.
template <PointModel Lo, PointModel Hi>
CQRCalibration calibrate_cqr_models(const Lo& lo_model, const Hi& hi_model, const Matrix& cal_X,
                                    std::span<const double> cal_y, const Matrix& test_X, double alpha) {
  if (cal_y.empty()) throw DataError("cqr: empty calibration set");
  if (cal_X.rows() != cal_y.size()) throw DataError("cqr: calibration rows do not match targets");
  CQRCalibration c;
  c.fitted_alpha = alpha;
  c.cal_lo = lo_model.predict(cal_X);
  c.cal_hi = hi_model.predict(cal_X);
  c.test_lo = lo_model.predict(test_X);
  c.test_hi = hi_model.predict(test_X);
  c.crossed = uncross(c.cal_lo, c.cal_hi) + uncross(c.test_lo, c.test_hi);
  c.scores = cqr_scores(cal_y, c.cal_lo, c.cal_hi);
  return c;
}

template <QuantileRegressorFactory F>
CQRCalibration calibrate_cqr(const Matrix& train_X, std::span<const double> train_y, const Matrix& cal_X,
                             std::span<const double> cal_y, const Matrix& test_X, const F& factory,
                             const IntervalConfig& cfg) {
  cfg.validate();
  detail::check_xy(train_X, train_y, "cqr");
  const auto lo = factory(train_X, train_y, cfg.alpha / 2);
  const auto hi = factory(train_X, train_y, 1.0 - cfg.alpha / 2);
  return calibrate_cqr_models(lo, hi, cal_X, cal_y, test_X, cfg.alpha);
}

template <QuantileRegressorFactory F>
IntervalBatch cqr(const Matrix& train_X, std::span<const double> train_y, const Matrix& cal_X,
                  std::span<const double> cal_y, const Matrix& test_X, const F& factory, const IntervalConfig& cfg) {
  return calibrate_cqr(train_X, train_y, cal_X, cal_y, test_X, factory, cfg).at(cfg.alpha);
}

}  // namespace uqr
