// Acceptance run: one PASS/FAIL/SKIP line per criterion. Exit status is
// non-zero only when a gating criterion (1-9) fails.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>

#include "oracles.hpp"
#include "uqr/conformal.hpp"
#include "uqr/data.hpp"
#include "uqr/gbrt.hpp"
#include "uqr/metrics.hpp"
#include "uqr/mlp.hpp"

using namespace uqr;

namespace {

struct Outcome {
  enum Status { pass, fail, skip } status;
  std::string detail;
};

Outcome verdict(bool ok, std::string detail) { return {ok ? Outcome::pass : Outcome::fail, std::move(detail)}; }

std::string fmt(double v, int prec = 4) {
  std::ostringstream s;
  s.precision(prec);
  s << v;
  return s.str();
}

const std::vector<Method> kAllMethods = {Method::naive,   Method::jackknife_plus_ab, Method::cv,
                                         Method::cv_plus, Method::cv_minmax,         Method::cqr};

BoostingParams shallow(std::uint64_t seed) { return {0.1, 3, 8, 100, Loss::squared(), seed}; }

// Train / calibration / test drawn from one synthetic stream.
struct Splits {
  Matrix trX, calX, teX;
  std::vector<double> trY, calY, teY, te_sigma;
};

Splits make_splits(std::size_t n_tr, std::size_t n_cal, std::size_t n_te, std::uint64_t seed, NoiseLaw law) {
  const auto d = synth_heteroscedastic(n_tr + n_cal + n_te, seed, law);
  auto range = [](std::size_t a, std::size_t b) {
    std::vector<std::size_t> v(b - a);
    std::iota(v.begin(), v.end(), a);
    return v;
  };
  const auto tr = d.subset(range(0, n_tr)), cal = d.subset(range(n_tr, n_tr + n_cal)),
             te = d.subset(range(n_tr + n_cal, n_tr + n_cal + n_te));
  return {tr.features, cal.features, te.features, tr.targets, cal.targets, te.targets, te.metadata.at("sigma")};
}

/// Fits every method once on the splits; `at(m, alpha)` then yields batches.
struct AllMethods {
  std::optional<NaiveCalibration> naive;
  std::optional<JackknifeABCalibration> jk;
  std::optional<CVCalibration> cv;
  std::optional<CQRCalibration> cqr;

  IntervalBatch at(Method m, double a) const {
    switch (m) {
      case Method::naive: return naive->at(a);
      case Method::jackknife_plus_ab: return jk->at(a);
      case Method::cqr: return cqr->at(a);
      default: return cv->at(m, a);
    }
  }
};

AllMethods fit_all(const Splits& s, std::uint64_t seed, double alpha, const std::vector<Method>& which) {
  const auto p = shallow(seed);
  auto mean_f = [&](const Matrix& X, std::span<const double> y) { return fit(X, y, p); };
  auto quant_f = [&](const Matrix& X, std::span<const double> y, double tau) {
    auto q = p;
    q.loss = Loss::pinball(tau);
    return fit(X, y, q);
  };
  auto has = [&](Method m) { return std::find(which.begin(), which.end(), m) != which.end(); };
  AllMethods out;
  IntervalConfig cfg;
  cfg.alpha = alpha;
  cfg.seed = seed;
  if (has(Method::naive)) out.naive = calibrate_naive(s.trX, s.trY, s.teX, mean_f);
  if (has(Method::jackknife_plus_ab)) {
    auto c = cfg;
    c.K = 30;
    out.jk = calibrate_jackknife_plus_ab(s.trX, s.trY, s.teX, mean_f, c);
  }
  if (has(Method::cv) || has(Method::cv_plus) || has(Method::cv_minmax)) {
    auto c = cfg;
    c.K = 10;
    out.cv = calibrate_cv(s.trX, s.trY, s.teX, mean_f, c);
  }
  if (has(Method::cqr)) out.cqr = calibrate_cqr(s.trX, s.trY, s.calX, s.calY, s.teX, quant_f, cfg);
  return out;
}

double width_spread(const IntervalBatch& b) {
  double lo = kInf, hi = -kInf;
  for (std::size_t i = 0; i < b.size(); ++i) {
    lo = std::min(lo, b.width(i));
    hi = std::max(hi, b.width(i));
  }
  return hi - lo;
}

double width_std(const IntervalBatch& b) {
  double m = 0, s = 0;
  for (std::size_t i = 0; i < b.size(); ++i) m += b.width(i) / static_cast<double>(b.size());
  for (std::size_t i = 0; i < b.size(); ++i) s += (b.width(i) - m) * (b.width(i) - m);
  return std::sqrt(s / static_cast<double>(b.size()));
}

// ---------------------------------------------------------------------------

Outcome coverage_over_seeds() {
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t seeds = 50;
  std::map<Method, double> cov;
  for (std::uint64_t s = 0; s < seeds; ++s) {
    const auto sp = make_splits(2000, 1000, 5000, 1000 + s, NoiseLaw::parse("constant"));
    const auto all = fit_all(sp, s, 0.1, kAllMethods);
    for (auto m : kAllMethods) cov[m] += picp(sp.teY, all.at(m, 0.1)) / seeds;
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const std::map<Method, double> floor = {{Method::cqr, 0.89},     {Method::cv, 0.89},
                                         {Method::cv_minmax, 0.89}, {Method::cv_plus, 0.79},
                                         {Method::jackknife_plus_ab, 0.79}};
  bool ok = secs <= 600;
  std::string d;
  for (auto m : kAllMethods) {
    d += std::string(method_name(m)) + "=" + fmt(cov[m]) + " ";
    if (floor.count(m)) ok = ok && cov[m] >= floor.at(m);
  }
  return verdict(ok, d + "(" + fmt(secs, 3) + " s)");
}

// Spread is the standard deviation of widths within a batch, averaged over
// five seeds; the max-min ratio is reported alongside.
Outcome width_adaptivity() {
  double flat = 0, std_h = 0, std_c = 0, range_h = 0, range_c = 0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto homo = make_splits(2000, 1000, 5000, seed, NoiseLaw::parse("constant"));
    const auto hetero = make_splits(2000, 1000, 5000, seed, NoiseLaw::parse("linear"));
    const std::vector<Method> which = {Method::naive, Method::cv, Method::cqr};
    const auto a = fit_all(homo, seed, 0.1, which), b = fit_all(hetero, seed, 0.1, which);
    for (Method m : {Method::naive, Method::cv})
      for (const auto* all : {&a, &b}) {
        const auto iv = all->at(m, 0.1);
        flat = std::max(flat, width_spread(iv) / mpiw(iv).mean);
      }
    const auto ch = b.at(Method::cqr, 0.1), cc = a.at(Method::cqr, 0.1);
    std_h += width_std(ch);
    std_c += width_std(cc);
    range_h += width_spread(ch);
    range_c += width_spread(cc);
  }
  return verdict(flat <= 1e-12 && std_h > 10 * std_c,
                 "naive/cv max relative spread " + fmt(flat, 2) + "; cqr hetero/homo spread ratio: std " +
                     fmt(std_h / std_c) + " (gated), max-min " + fmt(range_h / range_c) + " (not gated)");
}

Outcome width_tracks_sigma() {
  const auto sp = make_splits(2000, 1000, 1000, 11, NoiseLaw::parse("linear"));
  const auto all = fit_all(sp, 11, 0.1, {Method::cqr});
  const auto iv = all.at(Method::cqr, 0.1);
  std::vector<double> w(iv.size());
  for (std::size_t i = 0; i < iv.size(); ++i) w[i] = iv.width(i);
  const auto rc = spearman(w, sp.te_sigma);
  return verdict(rc.rho >= 0.8 && rc.p_value < 1e-6, "rho=" + fmt(rc.rho) + " p=" + fmt(rc.p_value) + " n=1000");
}

Outcome minmax_contains_plus() {
  std::size_t violations = 0, checked = 0;
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto sp = make_splits(500, 0, 500, 500 + s, NoiseLaw::parse(s % 2 ? "linear" : "constant"));
    const auto all = fit_all(sp, s, 0.1, {Method::cv});
    for (double a : default_alpha_grid()) {
      const auto mm = all.at(Method::cv_minmax, a), pl = all.at(Method::cv_plus, a);
      for (std::size_t j = 0; j < mm.size(); ++j, ++checked)
        violations += !(mm.lower[j] <= pl.lower[j] && pl.upper[j] <= mm.upper[j]);
    }
  }
  return verdict(violations == 0, std::to_string(violations) + " violations in " + std::to_string(checked) +
                                       " intervals (20 seeds x 19 levels)");
}

Outcome loop_oracles() {
  Rng rng(5150);
  std::map<Method, double> worst;
  std::size_t cases = 0;
  for (int c = 0; c < 100; ++c, ++cases) {
    const std::size_t n = 5 + rng.below(16), m = 1 + rng.below(6), n_cal = 5 + rng.below(16);
    const double alpha = 0.05 + 0.45 * rng.uniform();
    const auto t = oracle::linear_toy(n, m, 9000 + c), cal = oracle::linear_toy(n_cal, 0, 19000 + c);
    IntervalConfig cfg;
    cfg.alpha = alpha;
    cfg.seed = static_cast<std::uint64_t>(c);

    const auto nv = calibrate_naive(t.X, t.y, t.test_X, oracle::line_factory).at(alpha);
    worst[Method::naive] = std::max(worst[Method::naive], oracle::max_deviation(nv, oracle::naive(t, alpha)));

    auto jc = cfg;
    jc.K = 10 + rng.below(11);
    jc.max_resample_attempts = 10000;
    const auto jk = calibrate_jackknife_plus_ab(t.X, t.y, t.test_X, oracle::line_factory, jc);
    worst[Method::jackknife_plus_ab] = std::max(
        worst[Method::jackknife_plus_ab],
        oracle::max_deviation(jk.at(alpha), oracle::jackknife_plus_ab(t, jk.resamples, alpha)));

    auto cc = cfg;
    cc.K = 2 + rng.below(std::min<std::size_t>(n, 6) - 1);
    const auto cv = calibrate_cv(t.X, t.y, t.test_X, oracle::line_factory, cc);
    const auto want = oracle::cv_family(t, kfold(n, cc.K, cc.seed), alpha);
    worst[Method::cv] = std::max(worst[Method::cv], oracle::max_deviation(cv.at(Method::cv, alpha), want.cv));
    worst[Method::cv_plus] =
        std::max(worst[Method::cv_plus], oracle::max_deviation(cv.at(Method::cv_plus, alpha), want.plus));
    worst[Method::cv_minmax] =
        std::max(worst[Method::cv_minmax], oracle::max_deviation(cv.at(Method::cv_minmax, alpha), want.minmax, false));

    const auto q = calibrate_cqr(t.X, t.y, cal.X, cal.y, t.test_X, oracle::line_quantile_factory, cfg).at(alpha);
    worst[Method::cqr] = std::max(worst[Method::cqr], oracle::max_deviation(q, oracle::cqr(t, cal, alpha)));
  }
  bool ok = true;
  std::string d;
  for (auto m : kAllMethods) {
    ok = ok && worst[m] <= 1e-12;
    d += std::string(method_name(m)) + "=" + fmt(worst[m], 2) + " ";
  }
  return verdict(ok, d + "(max abs deviation, " + std::to_string(cases) + " cases, n<=20)");
}

Outcome quantile_rank_exact() {
  Rng rng(66);
  std::size_t mismatches = 0, checked = 0;
  for (std::size_t n = 1; n <= 100; ++n) {
    std::vector<double> v(n);
    for (auto& x : v) x = static_cast<double>(rng.below(40)) - 20.0 + (rng.bernoulli(0.5) ? rng.uniform() : 0.0);
    auto sorted = v;
    std::sort(sorted.begin(), sorted.end());
    for (int p = 1; p <= 99; ++p, ++checked) {
      const std::size_t k = ((100 - p) * (n + 1) + 99) / 100;  // integer ceiling, no rounding
      const double want = k > n ? kInf : sorted[k - 1];
      mismatches += empirical_quantile_hi(v, p / 100.0) != want;
    }
  }
  return verdict(mismatches == 0,
                 std::to_string(mismatches) + " mismatches over " + std::to_string(checked) + " (n, alpha) pairs");
}

Outcome mlp_gradient_check() {
  Rng shape(77);
  double worst = 0;
  for (std::uint64_t draw = 0; draw < 100; ++draw) {
    MLPConfig c;
    c.layer_widths = {2 + shape.below(7)};
    const std::size_t hidden = 1 + shape.below(3);
    for (std::size_t h = 0; h < hidden; ++h) c.layer_widths.push_back(1 + shape.below(6));
    c.layer_widths.push_back(1);
    c.seed = draw;
    auto m = mlp_init(c);
    Rng rng(4000 + draw);
    m.params.for_each([&](double& x) { x = rng.uniform(-1, 1); });
    const std::size_t rows = 2 + rng.below(6);
    Matrix X(rows, c.input_width());
    for (auto& x : X.data()) x = rng.uniform(-1, 1);
    std::vector<double> y(rows);
    for (auto& v : y) v = rng.uniform();
    const double wd = 1e-3;
    std::vector<double> analytic;
    mlp_gradients(m, X, y, wd).total().for_each([&](double g) { analytic.push_back(g); });
    std::vector<double*> ptrs;
    m.params.for_each([&](double& x) { ptrs.push_back(&x); });
    const double h = 1e-5;
    for (std::size_t k = 0; k < ptrs.size(); ++k) {
      const double keep = *ptrs[k];
      *ptrs[k] = keep + h;
      const double up = mlp_objective(m, X, y, wd);
      *ptrs[k] = keep - h;
      const double down = mlp_objective(m, X, y, wd);
      *ptrs[k] = keep;
      const double numeric = (up - down) / (2 * h);
      worst = std::max(worst, std::abs(numeric - analytic[k]) /
                                  std::max({std::abs(numeric), std::abs(analytic[k]), 1e-6}));
    }
  }
  return verdict(worst <= 1e-4, "worst relative error " + fmt(worst, 3) + " over 100 random nets");
}

Outcome metric_oracles() {
  Rng rng(88);
  double worst = 0;
  std::size_t exact_fail = 0, order_fail = 0;
  for (int d = 0; d < 1000; ++d) {
    const std::size_t n = 2 + rng.below(60);
    std::vector<double> y(n), p(n);
    IntervalBatch iv;
    iv.lower.resize(n);
    iv.upper.resize(n);
    iv.point.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = rng.normal() * 3;
      p[i] = y[i] + rng.normal();
      const double a = p[i] - std::abs(rng.normal()) * 2, b = p[i] + std::abs(rng.normal()) * 2;
      iv.lower[i] = rng.bernoulli(0.05) ? -kInf : a;
      iv.upper[i] = b;
      iv.point[i] = p[i];
    }
    if (pinball_loss(y, p, 0.5) != mae(y, p) / 2) ++exact_fail;
    if (rmse(y, p) < mae(y, p)) ++order_fail;

    long double cov = 0, wsum = 0, wcnt = 0, mean = 0, res = 0, tot = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (!(y[i] < iv.lower[i]) && !(y[i] > iv.upper[i])) cov += 1;
      if (std::isfinite(iv.lower[i])) {
        wsum += static_cast<long double>(iv.upper[i]) - iv.lower[i];
        wcnt += 1;
      }
      mean += y[i];
    }
    mean /= n;
    for (std::size_t i = 0; i < n; ++i) {
      res += (static_cast<long double>(y[i]) - p[i]) * (static_cast<long double>(y[i]) - p[i]);
      tot += (y[i] - mean) * (y[i] - mean);
    }
    worst = std::max(worst, std::abs(picp(y, iv) - static_cast<double>(cov / n)));
    if (wcnt > 0) worst = std::max(worst, std::abs(mpiw(iv).mean - static_cast<double>(wsum / wcnt)));
    worst = std::max(worst, std::abs(r2(y, p) - static_cast<double>(1 - res / tot)));
  }
  return verdict(exact_fail == 0 && order_fail == 0 && worst <= 1e-12,
                 "pinball(0.5) != MAE/2 in " + std::to_string(exact_fail) + ", RMSE < MAE in " +
                     std::to_string(order_fail) + ", worst PICP/MPIW/R2 deviation " + fmt(worst, 2) +
                     " over 1000 draws");
}

Outcome width_monotone() {
  const auto sp = make_splits(600, 300, 1000, 99, NoiseLaw::parse("sinusoidal"));
  const auto all = fit_all(sp, 99, 0.1, kAllMethods);
  const auto grid = default_alpha_grid();
  std::string bad;
  for (auto m : kAllMethods) {
    double prev = kInf;
    for (double a : grid) {
      const double w = mpiw(all.at(m, a)).mean;
      if (w > prev) bad += std::string(method_name(m)) + "@" + fmt(a) + " ";
      prev = w;
    }
  }
  return verdict(bad.empty(), bad.empty() ? "6 methods x 19 levels non-increasing" : "increases at " + bad);
}

Outcome catalogue_regression() {
  const char* path = std::getenv("UQR_DR16Q_CSV");
  if (!path || !*path)
    return {Outcome::skip, "set UQR_DR16Q_CSV (and optionally UQR_DR16Q_SCHEMA) to a prepared feature table"};
  const char* schema_env = std::getenv("UQR_DR16Q_SCHEMA");
  const std::string schema_path =
      schema_env && *schema_env ? schema_env : (std::filesystem::path(path).parent_path() / "schema.json").string();
  const auto d = load_csv(path, Schema::load(schema_path)).data;
  const auto score = evaluate_cv(d.features, d.targets, published_mean_params(0), 10);
  const double mae_m = score.mae_stats().mean, rmse_m = score.rmse_stats().mean;
  return verdict(std::abs(mae_m - 0.144) <= 0.04 && std::abs(rmse_m - 0.198) <= 0.06,
                 "10-fold MAE " + fmt(mae_m) + " (target 0.144 +/- 0.04), RMSE " + fmt(rmse_m) +
                     " (target 0.198 +/- 0.06), n=" + std::to_string(d.size()));
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"coverage over 50 seeds at alpha 0.1", coverage_over_seeds},
      {"constant-width methods flat, CQR adapts", width_adaptivity},
      {"CQR width rank-correlates with sigma(x)", width_tracks_sigma},
      {"cv_minmax contains cv_plus", minmax_contains_plus},
      {"interval methods match loop oracles", loop_oracles},
      {"empirical quantile matches integer rank", quantile_rank_exact},
      {"network gradients match finite differences", mlp_gradient_check},
      {"metrics match oracles", metric_oracles},
      {"MPIW non-increasing in alpha", width_monotone},
      {"catalogue 10-fold error (optional)", catalogue_regression},
  };
  bool gate_ok = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {Outcome::fail, std::string("threw: ") + e.what()};
    }
    const char* tag = o.status == Outcome::pass ? "PASS" : o.status == Outcome::fail ? "FAIL" : "SKIP";
    std::cout << "criterion " << (i + 1) << ": " << tag << "  " << criteria[i].first << "  [" << o.detail << "]"
              << std::endl;
    if (i < 9 && o.status == Outcome::fail) gate_ok = false;
  }
  return gate_ok ? 0 : 1;
}
