#pragma once

// Gradient-boosted regression trees with squared-error or pinball loss.
//
// Trees are grown best-first on the negative loss gradient using variance
// reduction, so max_leaf_nodes binds naturally alongside max_depth.
// Equal gains resolve to the lowest feature index, then the lowest
// threshold. For pinball loss the leaf values are replaced by the
// tau-quantile of the in-leaf residuals.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>
#include <span>
#include <string>
#include <vector>

#include "uqr/core.hpp"
#include "uqr/data.hpp"
#include "uqr/rng.hpp"

namespace uqr {

struct Loss {
  enum class Kind { squared_error, pinball };
  Kind kind = Kind::squared_error;
  double tau = 0.5;

  static Loss squared() { return {Kind::squared_error, 0.5}; }
  static Loss pinball(double tau) {
    if (!(tau > 0 && tau < 1)) throw ConfigError("pinball loss: tau must lie inside (0, 1)");
    return {Kind::pinball, tau};
  }

  bool is_pinball() const noexcept { return kind == Kind::pinball; }
  std::string name() const { return is_pinball() ? "pinball" : "squared_error"; }
  bool operator==(const Loss&) const = default;
};

/// Mean pinball loss at level tau.
inline double pinball_loss(std::span<const double> y, std::span<const double> pred, double tau) {
  if (!(tau > 0 && tau < 1)) throw ConfigError("pinball_loss: tau must lie inside (0, 1)");
  if (y.size() != pred.size()) throw DataError("pinball_loss: length mismatch");
  if (y.empty()) throw DataError("pinball_loss: empty input");
  double s = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double d = y[i] - pred[i];
    s += d >= 0 ? tau * d : (tau - 1.0) * d;
  }
  return s / static_cast<double>(y.size());
}

/// tau-quantile with linear interpolation between order statistics
/// (position tau * (n - 1)). Reorders v.
inline double quantile_linear(std::vector<double>& v, double tau) {
  if (v.empty()) throw DataError("quantile of an empty sample");
  const double pos = tau * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  std::nth_element(v.begin(), v.begin() + lo, v.end());
  const double a = v[lo];
  if (lo + 1 >= v.size()) return a;
  const double b = *std::min_element(v.begin() + lo + 1, v.end());
  return a + (pos - static_cast<double>(lo)) * (b - a);
}

inline constexpr std::size_t kUnbounded = std::numeric_limits<std::size_t>::max();

struct BoostingParams {
  double learning_rate = 0.1;
  std::size_t max_depth = 3;  // 0 grows single-leaf trees
  std::size_t max_leaf_nodes = 31;
  std::size_t n_estimators = 100;
  Loss loss = Loss::squared();
  std::uint64_t seed = 0;

  void validate() const {
    if (!(learning_rate > 0) || !std::isfinite(learning_rate))
      throw ConfigError("learning_rate: must be a positive finite number");
    if (max_leaf_nodes < 2) throw ConfigError("max_leaf_nodes: must be at least 2");
    if (n_estimators < 1) throw ConfigError("n_estimators: must be at least 1");
    if (loss.is_pinball() && !(loss.tau > 0 && loss.tau < 1))
      throw ConfigError("loss.tau: must lie inside (0, 1)");
  }

  bool operator==(const BoostingParams&) const = default;
};

/// Published best configurations from the randomised search.
inline BoostingParams published_mean_params(std::uint64_t seed = 0) {
  return {0.013, 26, 15, 251, Loss::squared(), seed};
}
inline BoostingParams published_quantile_params(double tau, std::uint64_t seed = 0) {
  return {0.051, 20, 24, 152, Loss::pinball(tau), seed};
}

struct TreeNode {
  int feature = -1;  // -1 marks a leaf
  double threshold = 0;
  int left = -1, right = -1;
  double value = 0;

  bool is_leaf() const noexcept { return feature < 0; }
  bool operator==(const TreeNode&) const = default;
};

/// Axis-aligned binary tree; samples with x[feature] <= threshold go left.
class RegressionTree {
 public:
  RegressionTree() = default;
  explicit RegressionTree(std::vector<TreeNode> nodes) : nodes_(std::move(nodes)) {}

  const std::vector<TreeNode>& nodes() const noexcept { return nodes_; }
  std::vector<TreeNode>& nodes() noexcept { return nodes_; }

  std::size_t leaf_index(std::span<const double> x) const {
    std::size_t k = 0;
    while (!nodes_[k].is_leaf())
      k = static_cast<std::size_t>(x[nodes_[k].feature] <= nodes_[k].threshold ? nodes_[k].left : nodes_[k].right);
    return k;
  }

  double predict(std::span<const double> x) const { return nodes_[leaf_index(x)].value; }

  std::size_t leaf_count() const {
    return static_cast<std::size_t>(std::count_if(nodes_.begin(), nodes_.end(), [](auto& n) { return n.is_leaf(); }));
  }

  /// Depth of the deepest leaf (root alone has depth 0).
  std::size_t depth() const { return depth_from(0); }

  /// Nodes in preorder with child links rewritten accordingly.
  std::vector<TreeNode> preorder() const {
    std::vector<TreeNode> out;
    append_preorder(0, out);
    return out;
  }

  bool operator==(const RegressionTree&) const = default;

 private:
  std::size_t depth_from(std::size_t k) const {
    if (nodes_[k].is_leaf()) return 0;
    return 1 + std::max(depth_from(nodes_[k].left), depth_from(nodes_[k].right));
  }

  int append_preorder(std::size_t k, std::vector<TreeNode>& out) const {
    const int self = static_cast<int>(out.size());
    out.push_back(nodes_[k]);
    if (!nodes_[k].is_leaf()) {
      const int l = append_preorder(nodes_[k].left, out);
      const int r = append_preorder(nodes_[k].right, out);
      out[self].left = l;
      out[self].right = r;
    }
    return self;
  }

  std::vector<TreeNode> nodes_;
};

struct GBRTModel {
  double base_value = 0;
  std::vector<RegressionTree> trees;
  BoostingParams params;
  std::size_t n_features = 0;

  double predict_row(std::span<const double> x) const {
    double s = 0;
    for (const auto& t : trees) s += t.predict(x);
    return base_value + params.learning_rate * s;
  }

  std::vector<double> predict(const Matrix& X) const {
    if (X.cols() != n_features)
      throw DataError("gbrt predict: feature width " + std::to_string(X.cols()) + " does not match training width " +
                      std::to_string(n_features));
    std::vector<double> out(X.rows());
    for (std::size_t i = 0; i < X.rows(); ++i) out[i] = predict_row(X.row(i));
    return out;
  }

  bool operator==(const GBRTModel&) const = default;
};

namespace detail {

struct SplitChoice {
  int feature = -1;
  double threshold = 0;
  double gain = 0;
};

class TreeBuilder {
 public:
  TreeBuilder(const Matrix& X, const std::vector<std::vector<std::uint32_t>>& presorted, const BoostingParams& p)
      : X_(X), presorted_(presorted), params_(p) {}

  /// Grows one tree on `grad`; leaf_of[i] receives each sample's leaf node.
  RegressionTree build(std::span<const double> grad, std::vector<std::size_t>& leaf_of) {
    grad_ = grad;
    nodes_.clear();
    std::vector<Open> open;
    open.push_back(make_open(0, presorted_));
    nodes_.emplace_back();
    std::size_t leaves = 1;
    while (leaves < params_.max_leaf_nodes) {
      std::size_t pick = open.size();
      for (std::size_t k = 0; k < open.size(); ++k)
        if (open[k].best.feature >= 0 && (pick == open.size() || open[k].best.gain > open[pick].best.gain)) pick = k;
      if (pick == open.size()) break;
      Open parent = std::move(open[pick]);
      open.erase(open.begin() + static_cast<std::ptrdiff_t>(pick));
      auto [left_lists, right_lists] = partition(parent);
      const int l = static_cast<int>(nodes_.size());
      nodes_.emplace_back();
      nodes_.emplace_back();
      auto& node = nodes_[parent.node];
      node.feature = parent.best.feature;
      node.threshold = parent.best.threshold;
      node.left = l;
      node.right = l + 1;
      open.push_back(make_open(parent.depth + 1, std::move(left_lists), l));
      open.push_back(make_open(parent.depth + 1, std::move(right_lists), l + 1));
      ++leaves;
    }
    leaf_of.assign(X_.rows(), 0);
    for (const auto& o : open) {
      double s = 0;
      for (auto i : o.lists[0]) {
        s += grad_[i];
        leaf_of[i] = static_cast<std::size_t>(o.node);
      }
      nodes_[o.node].value = s / static_cast<double>(o.lists[0].size());
    }
    return RegressionTree(std::move(nodes_));
  }

 private:
  struct Open {
    int node = 0;
    std::size_t depth = 0;
    std::vector<std::vector<std::uint32_t>> lists;  // per feature, samples sorted by that feature
    SplitChoice best;
  };

  Open make_open(std::size_t depth, std::vector<std::vector<std::uint32_t>> lists, int node = 0) {
    Open o;
    o.node = node;
    o.depth = depth;
    o.lists = std::move(lists);
    if (depth < params_.max_depth && o.lists[0].size() >= 2) o.best = find_split(o.lists);
    return o;
  }

  SplitChoice find_split(const std::vector<std::vector<std::uint32_t>>& lists) const {
    const auto& any = lists[0];
    const double n = static_cast<double>(any.size());
    double total = 0, total_sq = 0;
    for (auto i : any) {
      total += grad_[i];
      total_sq += grad_[i] * grad_[i];
    }
    const double parent_score = total * total / n;
    const double min_gain = 1e-14 * std::max(total_sq, std::numeric_limits<double>::min());
    SplitChoice best;
    for (std::size_t f = 0; f < lists.size(); ++f) {
      const auto& L = lists[f];
      double left = 0;
      for (std::size_t k = 0; k + 1 < L.size(); ++k) {
        left += grad_[L[k]];
        const double xa = X_(L[k], f), xb = X_(L[k + 1], f);
        if (!(xb > xa)) continue;
        const double nl = static_cast<double>(k + 1), nr = n - nl;
        const double right = total - left;
        const double gain = left * left / nl + right * right / nr - parent_score;
        if (gain > min_gain && (best.feature < 0 || gain > best.gain)) {
          double thr = 0.5 * (xa + xb);
          if (!(thr < xb)) thr = xa;
          best = {static_cast<int>(f), thr, gain};
        }
      }
    }
    return best;
  }

  std::pair<std::vector<std::vector<std::uint32_t>>, std::vector<std::vector<std::uint32_t>>> partition(
      const Open& o) const {
    const auto f = static_cast<std::size_t>(o.best.feature);
    std::vector<std::vector<std::uint32_t>> left(o.lists.size()), right(o.lists.size());
    for (std::size_t g = 0; g < o.lists.size(); ++g) {
      for (auto i : o.lists[g]) (X_(i, f) <= o.best.threshold ? left[g] : right[g]).push_back(i);
    }
    return {std::move(left), std::move(right)};
  }

  const Matrix& X_;
  const std::vector<std::vector<std::uint32_t>>& presorted_;
  const BoostingParams& params_;
  std::span<const double> grad_;
  std::vector<TreeNode> nodes_;
};

inline std::vector<std::vector<std::uint32_t>> presort(const Matrix& X) {
  std::vector<std::vector<std::uint32_t>> out(X.cols());
  for (std::size_t f = 0; f < X.cols(); ++f) {
    auto& o = out[f];
    o.resize(X.rows());
    std::iota(o.begin(), o.end(), 0u);
    std::stable_sort(o.begin(), o.end(), [&](auto a, auto b) { return X(a, f) < X(b, f); });
  }
  return out;
}

inline double training_loss(std::span<const double> y, std::span<const double> F, const Loss& loss) {
  if (loss.is_pinball()) return pinball_loss(y, F, loss.tau);
  double s = 0;
  for (std::size_t i = 0; i < y.size(); ++i) s += (y[i] - F[i]) * (y[i] - F[i]);
  return s / static_cast<double>(y.size());
}

}  // namespace detail

/// Fits the ensemble. `stage_loss`, when given, receives the training loss
/// after each stage.
inline GBRTModel fit(const Matrix& X, std::span<const double> y, const BoostingParams& params,
                     std::vector<double>* stage_loss = nullptr) {
  params.validate();
  if (y.empty() || X.rows() == 0) throw DataError("gbrt fit: empty dataset");
  if (X.rows() != y.size()) throw DataError("gbrt fit: feature rows do not match targets");
  if (y.size() < 2) throw DataError("gbrt fit: need at least 2 samples");
  if (X.cols() == 0) throw DataError("gbrt fit: no features");

  GBRTModel m;
  m.params = params;
  m.n_features = X.cols();
  const auto n = y.size();
  const bool pinball = params.loss.is_pinball();
  const double tau = params.loss.tau;
  {
    std::vector<double> tmp(y.begin(), y.end());
    m.base_value = pinball ? quantile_linear(tmp, tau) : std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(n);
  }
  std::vector<double> F(n, m.base_value), grad(n);
  const auto presorted = detail::presort(X);
  detail::TreeBuilder builder(X, presorted, params);
  std::vector<std::size_t> leaf_of;
  if (stage_loss) stage_loss->clear();
  m.trees.reserve(params.n_estimators);
  for (std::size_t s = 0; s < params.n_estimators; ++s) {
    for (std::size_t i = 0; i < n; ++i)
      grad[i] = pinball ? (y[i] > F[i] ? tau : tau - 1.0) : y[i] - F[i];
    RegressionTree tree = builder.build(grad, leaf_of);
    if (pinball) {
      std::vector<std::vector<double>> residuals(tree.nodes().size());
      for (std::size_t i = 0; i < n; ++i) residuals[leaf_of[i]].push_back(y[i] - F[i]);
      for (std::size_t k = 0; k < residuals.size(); ++k)
        if (!residuals[k].empty()) tree.nodes()[k].value = quantile_linear(residuals[k], tau);
    }
    for (std::size_t i = 0; i < n; ++i) F[i] += params.learning_rate * tree.nodes()[leaf_of[i]].value;
    m.trees.push_back(std::move(tree));
    if (stage_loss) stage_loss->push_back(detail::training_loss(y, F, params.loss));
  }
  return m;
}

inline GBRTModel fit(const Dataset& d, const BoostingParams& params) { return fit(d.features, d.targets, params); }

// ---------------------------------------------------------------------------
// Text serialisation: params header, then each tree in preorder.

inline void save_model(std::ostream& out, const GBRTModel& m) {
  const auto& p = m.params;
  out << "gbrt 1\n";
  out << "loss " << p.loss.name() << ' ' << format_double(p.loss.tau) << '\n';
  out << "learning_rate " << format_double(p.learning_rate) << '\n';
  out << "max_depth " << (p.max_depth == kUnbounded ? std::string("unbounded") : std::to_string(p.max_depth)) << '\n';
  out << "max_leaf_nodes "
      << (p.max_leaf_nodes == kUnbounded ? std::string("unbounded") : std::to_string(p.max_leaf_nodes)) << '\n';
  out << "n_estimators " << p.n_estimators << '\n';
  out << "seed " << p.seed << '\n';
  out << "n_features " << m.n_features << '\n';
  out << "base_value " << format_double(m.base_value) << '\n';
  out << "trees " << m.trees.size() << '\n';
  for (std::size_t t = 0; t < m.trees.size(); ++t) {
    const auto nodes = m.trees[t].preorder();
    out << "tree " << t << ' ' << nodes.size() << '\n';
    for (const auto& n : nodes)
      out << n.feature << ' ' << format_double(n.threshold) << ' ' << format_double(n.value) << '\n';
  }
}

inline GBRTModel load_model(std::istream& in) {
  auto fail = [](const std::string& what) -> DataError { return DataError("gbrt model: " + what); };
  auto expect = [&](const char* key) {
    std::string k;
    if (!(in >> k) || k != key) throw fail(std::string("expected '") + key + "'");
  };
  auto read_double = [&]() {
    std::string tok;
    double v;
    if (!(in >> tok) || !parse_double(tok, v)) throw fail("bad number '" + tok + "'");
    return v;
  };
  auto read_count = [&]() -> std::size_t {
    std::string tok;
    if (!(in >> tok)) throw fail("truncated");
    if (tok == "unbounded") return kUnbounded;
    return std::stoull(tok);
  };
  GBRTModel m;
  expect("gbrt");
  if (read_count() != 1) throw fail("unsupported version");
  expect("loss");
  std::string loss;
  in >> loss;
  const double tau = read_double();
  m.params.loss = loss == "pinball" ? Loss::pinball(tau) : Loss::squared();
  expect("learning_rate");
  m.params.learning_rate = read_double();
  expect("max_depth");
  m.params.max_depth = read_count();
  expect("max_leaf_nodes");
  m.params.max_leaf_nodes = read_count();
  expect("n_estimators");
  m.params.n_estimators = read_count();
  expect("seed");
  m.params.seed = read_count();
  expect("n_features");
  m.n_features = read_count();
  expect("base_value");
  m.base_value = read_double();
  expect("trees");
  const auto n_trees = read_count();
  for (std::size_t t = 0; t < n_trees; ++t) {
    expect("tree");
    (void)read_count();
    const auto count = read_count();
    std::vector<TreeNode> flat(count);
    for (auto& n : flat) {
      if (!(in >> n.feature)) throw fail("truncated node");
      n.threshold = read_double();
      n.value = read_double();
    }
    // Rebuild child links from preorder.
    std::size_t pos = 0;
    auto link = [&](auto&& self) -> int {
      if (pos >= flat.size()) throw fail("malformed tree");
      const int k = static_cast<int>(pos++);
      if (flat[k].feature >= 0) {
        flat[k].left = self(self);
        flat[k].right = self(self);
      }
      return k;
    };
    link(link);
    if (pos != flat.size()) throw fail("trailing nodes in tree");
    m.trees.emplace_back(std::move(flat));
  }
  return m;
}

// ---------------------------------------------------------------------------
// Cross-validation and randomised search

struct MeanStd {
  double mean = 0, std = 0;  // population standard deviation
};

inline MeanStd mean_std(std::span<const double> v) {
  MeanStd r;
  if (v.empty()) return r;
  r.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double s = 0;
  for (double x : v) s += (x - r.mean) * (x - r.mean);
  r.std = std::sqrt(s / static_cast<double>(v.size()));
  return r;
}

/// Per-fold held-out MAE, RMSE and the selection loss (RMSE for squared
/// error, mean pinball loss for pinball).
struct CVScore {
  std::vector<double> mae, rmse, loss;

  MeanStd mae_stats() const { return mean_std(mae); }
  MeanStd rmse_stats() const { return mean_std(rmse); }
  MeanStd loss_stats() const { return mean_std(loss); }
};

struct FoldScore {
  double mae, rmse, loss;
};

inline FoldScore score_fold(std::span<const double> y, std::span<const double> yhat, const Loss& loss) {
  if (y.size() != yhat.size() || y.empty()) throw DataError("score_fold: bad lengths");
  double a = 0, s = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    a += std::abs(y[i] - yhat[i]);
    s += (y[i] - yhat[i]) * (y[i] - yhat[i]);
  }
  const double n = static_cast<double>(y.size());
  FoldScore f{a / n, std::sqrt(s / n), 0};
  f.loss = loss.is_pinball() ? pinball_loss(y, yhat, loss.tau) : f.rmse;
  return f;
}

/// K-fold evaluation with any fitter: fit_predict(X_tr, y_tr, X_te) -> predictions.
template <class FitPredict>
CVScore evaluate_cv_with(const Matrix& X, std::span<const double> y, std::size_t folds, std::uint64_t seed,
                         const Loss& loss, FitPredict&& fit_predict) {
  if (y.size() < folds) throw DataError("cross-validation: fewer samples than folds");
  const auto parts = kfold(y.size(), folds, seed);
  CVScore score;
  for (const auto& held : parts) {
    const auto train = complement(y.size(), held);
    const auto ytr = select(y, train);
    const auto yte = select(y, held);
    const auto pred = fit_predict(X.select_rows(train), std::span<const double>(ytr), X.select_rows(held));
    const auto f = score_fold(yte, pred, loss);
    score.mae.push_back(f.mae);
    score.rmse.push_back(f.rmse);
    score.loss.push_back(f.loss);
  }
  return score;
}

/// K-fold evaluation of boosting; folds are drawn with params.seed.
inline CVScore evaluate_cv(const Matrix& X, std::span<const double> y, const BoostingParams& params,
                           std::size_t folds = 10) {
  return evaluate_cv_with(X, y, folds, params.seed, params.loss,
                          [&](const Matrix& Xtr, std::span<const double> ytr, const Matrix& Xte) {
                            return fit(Xtr, ytr, params).predict(Xte);
                          });
}

struct SearchSpace {
  double lr_lo = 0.0, lr_hi = 1.0;  // Uniform on the open interval
  std::size_t depth_lo = 2, depth_hi = 30;
  std::size_t leaves_lo = 2, leaves_hi = 50;
  std::size_t estimators_lo = 10, estimators_hi = 500;

  void validate() const {
    if (!(lr_lo <= lr_hi) || lr_lo < 0) throw ConfigError("search.learning_rate: bad range");
    if (depth_lo > depth_hi) throw ConfigError("search.max_depth: bad range");
    if (leaves_lo > leaves_hi || leaves_lo < 2) throw ConfigError("search.max_leaf_nodes: bad range");
    if (estimators_lo > estimators_hi || estimators_lo < 1) throw ConfigError("search.n_estimators: bad range");
  }

  BoostingParams midpoint(const Loss& loss, std::uint64_t seed) const {
    BoostingParams p;
    p.learning_rate = 0.5 * (lr_lo + lr_hi);
    p.max_depth = (depth_lo + depth_hi) / 2;
    p.max_leaf_nodes = (leaves_lo + leaves_hi) / 2;
    p.n_estimators = (estimators_lo + estimators_hi) / 2;
    p.loss = loss;
    p.seed = seed;
    return p;
  }

  /// Integers uniform inclusive of both ends; the rate uniform on (lo, hi).
  BoostingParams sample(Rng& rng, const Loss& loss, std::uint64_t seed) const {
    BoostingParams p;
    p.learning_rate = lr_lo == lr_hi ? lr_lo : lr_lo + (lr_hi - lr_lo) * rng.uniform_open();
    p.max_depth = static_cast<std::size_t>(rng.between(static_cast<std::int64_t>(depth_lo), static_cast<std::int64_t>(depth_hi)));
    p.max_leaf_nodes =
        static_cast<std::size_t>(rng.between(static_cast<std::int64_t>(leaves_lo), static_cast<std::int64_t>(leaves_hi)));
    p.n_estimators = static_cast<std::size_t>(
        rng.between(static_cast<std::int64_t>(estimators_lo), static_cast<std::int64_t>(estimators_hi)));
    p.loss = loss;
    p.seed = seed;
    return p;
  }
};

struct SearchTrial {
  BoostingParams params;
  CVScore score;
};

struct SearchResult {
  BoostingParams best;
  CVScore score;
  std::vector<SearchTrial> trials;
};

/// Randomised search: `iters` draws from `space`, each scored by the mean
/// K-fold selection loss on shared folds; earliest draw wins ties.
inline SearchResult random_search_cv(const Matrix& X, std::span<const double> y, const SearchSpace& space,
                                     std::size_t folds, std::size_t iters, const Loss& loss, std::uint64_t seed) {
  space.validate();
  if (iters < 1) throw ConfigError("search.iters: must be at least 1");
  if (y.size() < folds) throw DataError("random search: fewer samples than folds");
  Rng rng(seed);
  SearchResult res;
  std::size_t best = 0;
  for (std::size_t it = 0; it < iters; ++it) {
    auto p = space.sample(rng, loss, seed);
    auto score = evaluate_cv(X, y, p, folds);
    res.trials.push_back({p, std::move(score)});
    if (it > 0 && res.trials[it].score.loss_stats().mean < res.trials[best].score.loss_stats().mean) best = it;
  }
  res.best = res.trials[best].params;
  res.score = res.trials[best].score;
  return res;
}

}  // namespace uqr
