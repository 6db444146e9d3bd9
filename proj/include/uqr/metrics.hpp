#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <boost/math/distributions/students_t.hpp>

#include "uqr/core.hpp"
#include "uqr/interval.hpp"

namespace uqr {

namespace detail {
inline void require_same_length(std::size_t a, std::size_t b, const char* what) {
  if (a != b)
    throw DataError(std::string(what) + ": length mismatch (" + std::to_string(a) + " vs " + std::to_string(b) + ")");
}
}  // namespace detail

/// Fraction of targets inside their closed interval.
inline double picp(std::span<const double> y, const IntervalBatch& iv) {
  detail::require_same_length(y.size(), iv.size(), "picp");
  if (y.empty()) throw DataError("picp: empty input");
  std::size_t covered = 0;
  for (std::size_t i = 0; i < y.size(); ++i) covered += (iv.lower[i] <= y[i] && y[i] <= iv.upper[i]);
  return static_cast<double>(covered) / static_cast<double>(y.size());
}

struct WidthSummary {
  double mean;
  std::size_t n_infinite;
};

/// Mean width over the finite intervals; unbounded ones are only counted.
inline WidthSummary mpiw(const IntervalBatch& iv) {
  if (iv.size() == 0) throw DataError("mpiw: empty batch");
  double sum = 0;
  std::size_t finite = 0;
  for (std::size_t i = 0; i < iv.size(); ++i) {
    const double w = iv.width(i);
    if (std::isfinite(w)) {
      sum += w;
      ++finite;
    }
  }
  if (finite == 0) throw NumericError("mpiw: every interval is unbounded");
  return {sum / static_cast<double>(finite), iv.size() - finite};
}

inline double mae(std::span<const double> y, std::span<const double> yhat) {
  detail::require_same_length(y.size(), yhat.size(), "mae");
  if (y.empty()) throw DataError("mae: empty input");
  double s = 0;
  for (std::size_t i = 0; i < y.size(); ++i) s += std::abs(y[i] - yhat[i]);
  return s / static_cast<double>(y.size());
}

inline double rmse(std::span<const double> y, std::span<const double> yhat) {
  detail::require_same_length(y.size(), yhat.size(), "rmse");
  if (y.empty()) throw DataError("rmse: empty input");
  double s = 0;
  for (std::size_t i = 0; i < y.size(); ++i) s += (y[i] - yhat[i]) * (y[i] - yhat[i]);
  return std::sqrt(s / static_cast<double>(y.size()));
}

inline double r2(std::span<const double> y, std::span<const double> yhat) {
  detail::require_same_length(y.size(), yhat.size(), "r2");
  if (y.size() < 2) throw DataError("r2: need at least 2 samples");
  const double mean = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(y.size());
  double ss_res = 0, ss_tot = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    ss_res += (y[i] - yhat[i]) * (y[i] - yhat[i]);
    ss_tot += (y[i] - mean) * (y[i] - mean);
  }
  if (ss_tot == 0) throw NumericError("r2: target is constant");
  return 1.0 - ss_res / ss_tot;
}

// ---------------------------------------------------------------------------
// Reports

struct EvalReport {
  Method method = Method::naive;
  double alpha = 0.1;
  double picp = 0;
  double mpiw = 0;
  std::size_t n_infinite = 0;
  double r2_coverage = std::numeric_limits<double>::quiet_NaN();  // across a sweep grid
  double mae = 0;
  double rmse = 0;

  double picp_minus_nominal() const { return picp - (1.0 - alpha); }
};

inline EvalReport evaluate(std::span<const double> y, const IntervalBatch& iv) {
  EvalReport r;
  r.method = iv.method;
  r.alpha = iv.alpha;
  r.picp = picp(y, iv);
  try {
    const auto w = mpiw(iv);
    r.mpiw = w.mean;
    r.n_infinite = w.n_infinite;
  } catch (const NumericError&) {
    r.mpiw = kInf;
    r.n_infinite = iv.size();
  }
  r.mae = mae(y, iv.point);
  r.rmse = rmse(y, iv.point);
  return r;
}

inline constexpr const char* kReportHeader = "method,alpha,picp,picp_minus_nominal,mpiw,n_infinite,r2,mae,rmse";

inline void write_report_row(std::ostream& out, const EvalReport& r) {
  out << method_name(r.method) << ',' << format_double(r.alpha) << ',' << format_double(r.picp) << ','
      << format_double(r.picp_minus_nominal()) << ',' << format_double(r.mpiw) << ',' << r.n_infinite << ','
      << format_double(r.r2_coverage) << ',' << format_double(r.mae) << ',' << format_double(r.rmse) << '\n';
}

inline void write_reports_csv(std::ostream& out, std::span<const EvalReport> rows) {
  out << kReportHeader << '\n';
  for (const auto& r : rows) write_report_row(out, r);
}

/// Strictly increasing levels inside (0, 1).
inline void validate_alpha_grid(std::span<const double> alphas) {
  if (alphas.empty()) throw ConfigError("alphas: grid must not be empty");
  for (std::size_t i = 0; i < alphas.size(); ++i) {
    if (!(alphas[i] > 0 && alphas[i] < 1)) throw ConfigError("alphas: every level must lie inside (0, 1)");
    if (i > 0 && !(alphas[i] > alphas[i - 1])) throw ConfigError("alphas: grid must be strictly increasing");
  }
}

inline std::vector<double> default_alpha_grid() {
  std::vector<double> g;
  for (int k = 1; k <= 19; ++k) g.push_back(k / 20.0);
  return g;
}

struct SweepTable {
  std::vector<double> alphas;
  std::vector<EvalReport> rows;  // method-major, grid order within a method
};

/// For each method and level, evaluates intervals produced by `intervals`
/// and fills each method's R^2 of PICP against nominal coverage.
inline SweepTable coverage_sweep(std::span<const Method> methods, std::span<const double> alphas,
                                 std::span<const double> y,
                                 const std::function<IntervalBatch(Method, double)>& intervals) {
  validate_alpha_grid(alphas);
  SweepTable t;
  t.alphas.assign(alphas.begin(), alphas.end());
  for (auto m : methods) {
    const auto first = t.rows.size();
    std::vector<double> nominal, observed;
    for (double a : alphas) {
      t.rows.push_back(evaluate(y, intervals(m, a)));
      nominal.push_back(1.0 - a);
      observed.push_back(t.rows.back().picp);
    }
    double r2c = std::numeric_limits<double>::quiet_NaN();
    if (alphas.size() >= 2) r2c = r2(nominal, observed);
    for (auto i = first; i < t.rows.size(); ++i) t.rows[i].r2_coverage = r2c;
  }
  return t;
}

// ---------------------------------------------------------------------------
// Rank correlation

struct RankCorrelation {
  double rho = 0;
  double p_value = 1;
  std::size_t n = 0;
  bool exact_p = false;
};

/// Average (mid) ranks, 1-based.
inline std::vector<double> mid_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

inline double pearson(std::span<const double> a, std::span<const double> b) {
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0 || sbb == 0) throw NumericError("correlation undefined for a constant vector");
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

/// Two-sided p-value of rho from the t approximation with n - 2 dof.
inline double spearman_t_pvalue(double rho, std::size_t n) {
  const double dof = static_cast<double>(n - 2);
  if (std::abs(rho) >= 1.0) return 0.0;
  const double t = rho * std::sqrt(dof / ((1.0 - rho) * (1.0 + rho)));
  boost::math::students_t_distribution<double> dist(dof);
  return std::min(1.0, 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t))));
}

inline constexpr std::size_t kExactPermutationMaxN = 10;

/// Spearman's rho with mid-ranks. p is exact over all permutations for
/// n <= 10, otherwise the t approximation.
inline RankCorrelation spearman(std::span<const double> x, std::span<const double> y) {
  detail::require_same_length(x.size(), y.size(), "spearman");
  if (x.size() < 4) throw DataError("spearman: need at least 4 samples");
  const auto rx = mid_ranks(x);
  auto ry = mid_ranks(y);
  RankCorrelation out;
  out.n = x.size();
  out.rho = pearson(rx, ry);
  if (out.n <= kExactPermutationMaxN) {
    std::sort(ry.begin(), ry.end());
    std::size_t extreme = 0, total = 0;
    const double threshold = std::abs(out.rho) - 1e-12;
    do {
      ++total;
      extreme += std::abs(pearson(rx, ry)) >= threshold;
    } while (std::next_permutation(ry.begin(), ry.end()));
    // next_permutation skips duplicate arrangements of tied ranks; each
    // distinct arrangement carries the same multiplicity so the ratio holds.
    out.p_value = static_cast<double>(extreme) / static_cast<double>(total);
    out.exact_p = true;
  } else {
    out.p_value = spearman_t_pvalue(out.rho, out.n);
  }
  return out;
}

struct PropertyCorrelation {
  std::string property;
  std::optional<RankCorrelation> corr;  // empty when undefined (constant widths or property)
};

/// Spearman correlation of finite interval widths against each named column.
inline std::vector<PropertyCorrelation> width_property_report(
    const IntervalBatch& iv, const std::map<std::string, std::vector<double>>& columns,
    std::span<const std::string> properties) {
  std::vector<PropertyCorrelation> out;
  for (const auto& p : properties) {
    auto it = columns.find(p);
    if (it == columns.end()) throw DataError("width_property_report: column '" + p + "' is absent");
    detail::require_same_length(it->second.size(), iv.size(), "width_property_report");
    std::vector<double> w, v;
    for (std::size_t i = 0; i < iv.size(); ++i)
      if (!iv.is_infinite(i) && std::isfinite(it->second[i])) {
        w.push_back(iv.width(i));
        v.push_back(it->second[i]);
      }
    PropertyCorrelation pc{p, std::nullopt};
    try {
      pc.corr = spearman(w, v);
    } catch (const NumericError&) {
    } catch (const DataError&) {
    }
    out.push_back(std::move(pc));
  }
  return out;
}

inline void write_width_property_csv(std::ostream& out, Method m, std::span<const PropertyCorrelation> rows) {
  for (const auto& r : rows) {
    out << method_name(m) << ',' << r.property << ',';
    if (r.corr)
      out << format_double(r.corr->rho) << ',' << format_double(r.corr->p_value) << ',' << r.corr->n << ",ok\n";
    else
      out << ",,,not_applicable\n";
  }
}

}  // namespace uqr
