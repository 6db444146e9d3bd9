#pragma once

// Tabular ingestion, quality cuts, min-max normalisation, deterministic
// splits and fold assignment, virial mass arithmetic, and the synthetic
// heteroscedastic benchmark generator.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <numbers>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"
#include "uqr/core.hpp"
#include "uqr/rng.hpp"

namespace uqr {

struct Dataset {
  Matrix features;
  std::vector<double> targets;
  std::map<std::string, std::vector<double>> metadata;
  std::vector<std::string> ids;
  std::vector<std::string> feature_names;
  std::string target_name = "y";

  std::size_t size() const noexcept { return targets.size(); }
  std::size_t n_features() const noexcept { return features.cols(); }

  const std::vector<double>& meta(const std::string& name) const {
    auto it = metadata.find(name);
    if (it == metadata.end()) throw DataError("metadata column '" + name + "' is absent");
    return it->second;
  }

  Dataset subset(std::span<const std::size_t> idx) const {
    Dataset out;
    out.features = features.select_rows(idx);
    out.targets = select(targets, idx);
    for (const auto& [k, v] : metadata) out.metadata[k] = select(v, idx);
    if (!ids.empty()) out.ids = select(ids, idx);
    out.feature_names = feature_names;
    out.target_name = target_name;
    return out;
  }

  /// Throws DataError if column lengths disagree.
  void check_shape() const {
    const auto n = targets.size();
    if (features.rows() != n) throw DataError("feature rows do not match target length");
    for (const auto& [k, v] : metadata)
      if (v.size() != n) throw DataError("metadata column '" + k + "' has wrong length");
    if (!ids.empty() && ids.size() != n) throw DataError("id column has wrong length");
    if (!feature_names.empty() && feature_names.size() != features.cols())
      throw DataError("feature name count does not match feature width");
  }
};

// ---------------------------------------------------------------------------
// Schema

enum class ColumnRole { feature, target, metadata, id, ignore };

struct ColumnSpec {
  ColumnRole role = ColumnRole::ignore;
  std::string meta_name;  // only for metadata
};

/// Column-name to role map. Roles are spelled "feature", "target", "id",
/// "ignore" or "metadata:<name>". Optionally every column whose name starts
/// with feature_prefix is a feature.
struct Schema {
  std::map<std::string, ColumnSpec> columns;
  std::string feature_prefix;

  static ColumnSpec parse_role(const std::string& role) {
    if (role == "feature") return {ColumnRole::feature, {}};
    if (role == "target") return {ColumnRole::target, {}};
    if (role == "id") return {ColumnRole::id, {}};
    if (role == "ignore") return {ColumnRole::ignore, {}};
    constexpr std::string_view meta = "metadata:";
    if (role.starts_with(meta) && role.size() > meta.size())
      return {ColumnRole::metadata, role.substr(meta.size())};
    throw ConfigError("schema: unknown column role '" + role + "'");
  }

  static Schema from_json(const nlohmann::json& j) {
    Schema s;
    if (!j.is_object()) throw ConfigError("schema: expected an object");
    if (j.contains("feature_prefix")) {
      if (!j["feature_prefix"].is_string()) throw ConfigError("schema.feature_prefix: expected string");
      s.feature_prefix = j["feature_prefix"].get<std::string>();
    }
    if (j.contains("columns")) {
      if (!j["columns"].is_object()) throw ConfigError("schema.columns: expected an object");
      for (const auto& [name, role] : j["columns"].items()) {
        if (!role.is_string()) throw ConfigError("schema.columns." + name + ": expected string");
        s.columns[name] = parse_role(role.get<std::string>());
      }
    }
    std::size_t targets = 0;
    for (const auto& [_, c] : s.columns) targets += c.role == ColumnRole::target;
    if (targets != 1) throw ConfigError("schema.columns: exactly one target column is required");
    return s;
  }

  static Schema load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open schema file '" + path + "'");
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("schema '" + path + "': " + e.what());
    }
    return from_json(j);
  }

  nlohmann::json to_json() const {
    nlohmann::json cols = nlohmann::json::object();
    for (const auto& [name, c] : columns) {
      switch (c.role) {
        case ColumnRole::feature: cols[name] = "feature"; break;
        case ColumnRole::target: cols[name] = "target"; break;
        case ColumnRole::id: cols[name] = "id"; break;
        case ColumnRole::ignore: cols[name] = "ignore"; break;
        case ColumnRole::metadata: cols[name] = "metadata:" + c.meta_name; break;
      }
    }
    nlohmann::json j{{"columns", cols}};
    if (!feature_prefix.empty()) j["feature_prefix"] = feature_prefix;
    return j;
  }

  /// Schema matching what write_csv emits for d.
  static Schema for_dataset(const Dataset& d) {
    Schema s;
    if (!d.ids.empty()) s.columns["id"] = {ColumnRole::id, {}};
    for (const auto& f : d.feature_names) s.columns[f] = {ColumnRole::feature, {}};
    s.columns[d.target_name] = {ColumnRole::target, {}};
    for (const auto& [k, _] : d.metadata) s.columns[k] = {ColumnRole::metadata, k};
    return s;
  }
};

// ---------------------------------------------------------------------------
// CSV

namespace detail {

inline std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> cells;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      cells.push_back(std::move(cur));
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  cells.push_back(std::move(cur));
  return cells;
}

inline std::string quote_csv(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace detail

struct LoadResult {
  Dataset data;
  std::size_t rows_read = 0;
  std::size_t rows_dropped = 0;  // rows with a non-finite feature or target
};

/// Parses CSV text. Empty numeric cells read as NaN; text that is not a
/// number is an error naming the row and column.
inline LoadResult parse_csv(std::istream& in, const Schema& schema, const std::string& source = "<csv>") {
  std::string line;
  if (!std::getline(in, line)) throw DataError(source + ": missing header row");
  if (line.starts_with("\xEF\xBB\xBF")) line.erase(0, 3);
  const auto header = detail::split_csv_line(line);

  std::vector<ColumnSpec> roles(header.size());
  for (std::size_t c = 0; c < header.size(); ++c) {
    auto it = schema.columns.find(header[c]);
    if (it != schema.columns.end())
      roles[c] = it->second;
    else if (!schema.feature_prefix.empty() && header[c].starts_with(schema.feature_prefix))
      roles[c] = {ColumnRole::feature, {}};
  }
  for (const auto& [name, _] : schema.columns)
    if (std::find(header.begin(), header.end(), name) == header.end())
      throw DataError(source + ": schema column '" + name + "' not found in header");

  LoadResult res;
  Dataset& d = res.data;
  std::vector<std::size_t> feature_cols;
  std::optional<std::size_t> target_col, id_col;
  std::vector<std::pair<std::size_t, std::string>> meta_cols;
  for (std::size_t c = 0; c < header.size(); ++c) {
    switch (roles[c].role) {
      case ColumnRole::feature:
        feature_cols.push_back(c);
        d.feature_names.push_back(header[c]);
        break;
      case ColumnRole::target:
        target_col = c;
        d.target_name = header[c];
        break;
      case ColumnRole::id: id_col = c; break;
      case ColumnRole::metadata: meta_cols.emplace_back(c, roles[c].meta_name); break;
      case ColumnRole::ignore: break;
    }
  }
  if (!target_col) throw DataError(source + ": no target column");
  if (feature_cols.empty()) throw DataError(source + ": schema names no feature column");

  std::vector<double> feats;
  std::vector<std::vector<double>> metas(meta_cols.size());
  std::size_t line_no = 1;
  std::vector<double> row_feats(feature_cols.size());
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != header.size())
      throw DataError(source + ": row " + std::to_string(line_no) + " has " + std::to_string(cells.size()) +
                      " cells, header has " + std::to_string(header.size()));
    ++res.rows_read;
    auto number = [&](std::size_t c) {
      double v = std::numeric_limits<double>::quiet_NaN();
      std::string_view cell = cells[c];
      if (cell.find_first_not_of(" \t") == std::string_view::npos) return v;
      if (!parse_double(cell, v))
        throw DataError(source + ": unparseable number '" + cells[c] + "' at row " + std::to_string(line_no) +
                        ", column '" + header[c] + "'");
      return v;
    };
    bool finite = true;
    for (std::size_t k = 0; k < feature_cols.size(); ++k) {
      row_feats[k] = number(feature_cols[k]);
      finite = finite && std::isfinite(row_feats[k]);
    }
    const double y = number(*target_col);
    finite = finite && std::isfinite(y);
    std::vector<double> row_meta(meta_cols.size());
    for (std::size_t k = 0; k < meta_cols.size(); ++k) row_meta[k] = number(meta_cols[k].first);
    if (!finite) {
      ++res.rows_dropped;
      continue;
    }
    feats.insert(feats.end(), row_feats.begin(), row_feats.end());
    d.targets.push_back(y);
    for (std::size_t k = 0; k < meta_cols.size(); ++k) metas[k].push_back(row_meta[k]);
    if (id_col) d.ids.push_back(cells[*id_col]);
  }
  d.features = Matrix(d.targets.size(), feature_cols.size());
  d.features.data() = std::move(feats);
  for (std::size_t k = 0; k < meta_cols.size(); ++k) d.metadata[meta_cols[k].second] = std::move(metas[k]);
  return res;
}

inline LoadResult load_csv(const std::string& path, const Schema& schema) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open data file '" + path + "'");
  return parse_csv(in, schema, path);
}

/// Writes id, features, target, then metadata (by name) with shortest
/// round-trip number formatting.
inline void write_csv(std::ostream& out, const Dataset& d) {
  d.check_shape();
  std::vector<std::string> names = d.feature_names;
  if (names.empty())
    for (std::size_t c = 0; c < d.n_features(); ++c) names.push_back("f" + std::to_string(c));
  bool first = true;
  auto sep = [&] {
    if (!first) out << ',';
    first = false;
  };
  if (!d.ids.empty()) {
    sep();
    out << "id";
  }
  for (const auto& n : names) {
    sep();
    out << detail::quote_csv(n);
  }
  sep();
  out << detail::quote_csv(d.target_name);
  for (const auto& [k, _] : d.metadata) {
    sep();
    out << detail::quote_csv(k);
  }
  out << '\n';
  for (std::size_t i = 0; i < d.size(); ++i) {
    first = true;
    if (!d.ids.empty()) {
      sep();
      out << detail::quote_csv(d.ids[i]);
    }
    for (double v : d.features.row(i)) {
      sep();
      out << format_double(v);
    }
    sep();
    out << format_double(d.targets[i]);
    for (const auto& [_, v] : d.metadata) {
      sep();
      out << format_double(v[i]);
    }
    out << '\n';
  }
}

inline void write_csv(const std::string& path, const Dataset& d) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path + "'");
  write_csv(out, d);
}

/// 64-bit FNV-1a; used to reference input files by content.
inline std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hash_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "' for hashing");
  std::ostringstream ss;
  ss << in.rdbuf();
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(ss.str())));
  return std::string("fnv1a64:") + buf;
}

// ---------------------------------------------------------------------------
// Quality cuts

/// Thresholds for the catalogue selection. Column names are
/// "<line>_<quantity>" for each entry of `lines` (or bare "<quantity>" for
/// an empty line name): flux_snr, log_L, fwhm, log_mass, mass_err,
/// fwhm_err; the per-pixel signal-to-noise column is `pixel_snr_column`.
struct QualityCutSpec {
  double min_flux_snr = 2.0;
  std::array<double, 2> log_lum_range{38.0, 48.0};
  double min_pixel_snr = 10.0;
  double max_mass_err = 0.5;
  double max_width_err = 2000.0;
  std::vector<std::string> lines{"hbeta", "mgii"};
  std::string pixel_snr_column = "snr";

  void validate() const {
    if (!(log_lum_range[0] < log_lum_range[1]))
      throw ConfigError("quality_cuts.log_lum_range: lower bound must be below upper bound");
    for (double t : {min_flux_snr, min_pixel_snr, max_mass_err, max_width_err})
      if (!(t >= 0)) throw ConfigError("quality_cuts: thresholds must be >= 0");
    if (lines.empty()) throw ConfigError("quality_cuts.lines: must not be empty");
  }
};

struct Criterion {
  std::string name;
  std::string column;
  std::function<bool(double)> keep;
};

/// The selection criteria in catalogue order: flux S/N per line, line
/// luminosity range per line, pixel S/N, width available, mass available,
/// mass error, width error.
inline std::vector<Criterion> quality_criteria(const QualityCutSpec& spec) {
  spec.validate();
  auto col = [](const std::string& line, const char* q) {
    return line.empty() ? std::string(q) : line + "_" + q;
  };
  std::vector<Criterion> out;
  for (const auto& l : spec.lines)
    out.push_back({col(l, "flux_snr") + " > min_flux_snr", col(l, "flux_snr"),
                   [t = spec.min_flux_snr](double v) { return v > t; }});
  for (const auto& l : spec.lines)
    out.push_back({col(l, "log_L") + " in log_lum_range", col(l, "log_L"),
                   [r = spec.log_lum_range](double v) { return v >= r[0] && v <= r[1]; }});
  out.push_back({spec.pixel_snr_column + " >= min_pixel_snr", spec.pixel_snr_column,
                 [t = spec.min_pixel_snr](double v) { return v >= t; }});
  for (const auto& l : spec.lines)
    out.push_back({col(l, "fwhm") + " available", col(l, "fwhm"), [](double v) { return std::isfinite(v); }});
  for (const auto& l : spec.lines)
    out.push_back(
        {col(l, "log_mass") + " available", col(l, "log_mass"), [](double v) { return std::isfinite(v); }});
  for (const auto& l : spec.lines)
    out.push_back({col(l, "mass_err") + " < max_mass_err", col(l, "mass_err"),
                   [t = spec.max_mass_err](double v) { return v < t; }});
  for (const auto& l : spec.lines)
    out.push_back({col(l, "fwhm_err") + " < max_width_err", col(l, "fwhm_err"),
                   [t = spec.max_width_err](double v) { return v < t; }});
  return out;
}

struct CutStep {
  std::string criterion;
  std::size_t survivors;
};

struct CutResult {
  Dataset data;
  std::vector<CutStep> steps;
};

/// Applies criteria sequentially, recording survivors after each.
inline CutResult apply_criteria(const Dataset& raw, const std::vector<Criterion>& criteria) {
  for (const auto& c : criteria) (void)raw.meta(c.column);
  std::vector<std::size_t> alive(raw.size());
  std::iota(alive.begin(), alive.end(), std::size_t{0});
  CutResult res;
  for (const auto& c : criteria) {
    const auto& v = raw.meta(c.column);
    std::erase_if(alive, [&](std::size_t i) { return !c.keep(v[i]); });
    res.steps.push_back({c.name, alive.size()});
  }
  res.data = raw.subset(alive);
  return res;
}

inline CutResult apply_quality_cuts(const Dataset& raw, const QualityCutSpec& spec) {
  return apply_criteria(raw, quality_criteria(spec));
}

// ---------------------------------------------------------------------------
// Normalisation

struct NormalizationState {
  std::vector<double> feature_min, feature_max;
  double target_min = 0.0, target_max = 1.0;

  double target_range() const { return target_max - target_min; }

  static NormalizationState fit(const Dataset& d) {
    if (d.size() == 0) throw DataError("cannot normalise an empty dataset");
    NormalizationState s;
    const auto p = d.n_features();
    s.feature_min.assign(p, kInf);
    s.feature_max.assign(p, -kInf);
    for (std::size_t i = 0; i < d.size(); ++i) {
      auto r = d.features.row(i);
      for (std::size_t c = 0; c < p; ++c) {
        s.feature_min[c] = std::min(s.feature_min[c], r[c]);
        s.feature_max[c] = std::max(s.feature_max[c], r[c]);
      }
    }
    for (std::size_t c = 0; c < p; ++c)
      if (!(s.feature_max[c] > s.feature_min[c])) {
        const auto name = c < d.feature_names.size() ? d.feature_names[c] : "#" + std::to_string(c);
        throw DataError("feature column '" + name + "' is constant; cannot normalise");
      }
    auto [lo, hi] = std::minmax_element(d.targets.begin(), d.targets.end());
    s.target_min = *lo;
    s.target_max = *hi;
    if (!(s.target_max > s.target_min)) throw DataError("target column is constant; cannot normalise");
    return s;
  }

  /// (x - min) / (max - min); values outside the fitted range are kept.
  Dataset apply(const Dataset& d) const {
    if (d.n_features() != feature_min.size()) throw DataError("normalisation width mismatch");
    Dataset out = d;
    for (std::size_t i = 0; i < d.size(); ++i) {
      auto r = out.features.row(i);
      for (std::size_t c = 0; c < r.size(); ++c)
        r[c] = (r[c] - feature_min[c]) / (feature_max[c] - feature_min[c]);
    }
    for (auto& y : out.targets) y = normalize_target(y);
    return out;
  }

  Dataset invert(const Dataset& d) const {
    if (d.n_features() != feature_min.size()) throw DataError("normalisation width mismatch");
    Dataset out = d;
    for (std::size_t i = 0; i < d.size(); ++i) {
      auto r = out.features.row(i);
      for (std::size_t c = 0; c < r.size(); ++c)
        r[c] = r[c] * (feature_max[c] - feature_min[c]) + feature_min[c];
    }
    for (auto& y : out.targets) y = denormalize_target(y);
    return out;
  }

  double normalize_target(double y) const { return (y - target_min) / target_range(); }
  double denormalize_target(double y) const { return y * target_range() + target_min; }
};

inline std::pair<Dataset, NormalizationState> normalize(const Dataset& d) {
  auto s = NormalizationState::fit(d);
  return {s.apply(d), s};
}

inline Dataset denormalize(const Dataset& d, const NormalizationState& s) { return s.invert(d); }

// ---------------------------------------------------------------------------
// Splits and folds

struct SplitIndices {
  std::vector<std::size_t> train, calibration, test;
};

/// Integer sizes for the given fractions by largest remainder (ties to
/// the earlier part). Sizes are within one of fraction * n.
inline std::vector<std::size_t> partition_sizes(std::size_t n, std::span<const double> fractions) {
  double total = 0;
  for (double f : fractions) {
    if (!(f >= 0)) throw ConfigError("split.fractions: fractions must be non-negative");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("split.fractions: fractions must sum to 1");
  std::vector<std::size_t> sizes(fractions.size());
  std::vector<std::pair<double, std::size_t>> rem;
  std::size_t used = 0;
  for (std::size_t k = 0; k < fractions.size(); ++k) {
    const double exact = fractions[k] * static_cast<double>(n);
    const double fl = std::floor(exact + 1e-9);
    sizes[k] = static_cast<std::size_t>(fl);
    used += sizes[k];
    // Rounded so that float noise cannot reorder equal remainders.
    rem.emplace_back(std::round((exact - fl) * 1e9), k);
  }
  std::stable_sort(rem.begin(), rem.end(), [](auto& a, auto& b) { return a.first > b.first; });
  for (std::size_t r = 0; used < n; ++r, ++used) ++sizes[rem[r % rem.size()].second];
  return sizes;
}

/// Seeded uniform permutation, then contiguous train/calibration/test slices.
inline SplitIndices split(std::size_t n, std::array<double, 3> fractions, std::uint64_t seed) {
  if (n < 3) throw DataError("split: need at least 3 samples");
  const auto sizes = partition_sizes(n, fractions);
  for (auto s : sizes)
    if (s == 0) throw DataError("split: " + std::to_string(n) + " samples leave an empty split");
  Rng rng(seed);
  const auto perm = permutation(n, rng);
  SplitIndices out;
  out.train.assign(perm.begin(), perm.begin() + sizes[0]);
  out.calibration.assign(perm.begin() + sizes[0], perm.begin() + sizes[0] + sizes[1]);
  out.test.assign(perm.begin() + sizes[0] + sizes[1], perm.end());
  return out;
}

/// K folds: seeded permutation cut into contiguous chunks; the first n % K
/// folds get one extra sample.
inline std::vector<std::vector<std::size_t>> kfold(std::size_t n, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw ConfigError("folds: K must be at least 2");
  if (n < k) throw DataError("folds: " + std::to_string(n) + " samples cannot fill " + std::to_string(k) + " folds");
  Rng rng(seed);
  const auto perm = permutation(n, rng);
  std::vector<std::vector<std::size_t>> folds(k);
  std::size_t pos = 0;
  for (std::size_t f = 0; f < k; ++f) {
    const std::size_t size = n / k + (f < n % k ? 1 : 0);
    folds[f].assign(perm.begin() + pos, perm.begin() + pos + size);
    pos += size;
  }
  return folds;
}

/// Complement of a fold within 0..n, ascending.
inline std::vector<std::size_t> complement(std::size_t n, std::span<const std::size_t> held_out) {
  std::vector<char> mask(n, 0);
  for (auto i : held_out) mask[i] = 1;
  std::vector<std::size_t> out;
  out.reserve(n - held_out.size());
  for (std::size_t i = 0; i < n; ++i)
    if (!mask[i]) out.push_back(i);
  return out;
}

// ---------------------------------------------------------------------------
// Virial mass

struct VirialCoefficients {
  double a, b, c = 2.0;
};

inline constexpr VirialCoefficients kHbetaVP06{0.91, 0.50, 2.0};
inline constexpr VirialCoefficients kMgiiS11{0.74, 0.62, 2.0};

/// log10(M / Msun) = a + b * (log_L - 44) + c * log10(FWHM / km s^-1),
/// with log_L in log10 erg s^-1.
inline double virial_log_mass(double log_L, double fwhm_kms, VirialCoefficients k) {
  if (!(fwhm_kms > 0)) throw DataError("virial_log_mass: FWHM must be positive");
  return k.a + k.b * (log_L - 44.0) + k.c * std::log10(fwhm_kms);
}

// ---------------------------------------------------------------------------
// Synthetic data

enum class NoiseKind { constant, linear, sinusoidal };

struct NoiseLaw {
  NoiseKind kind = NoiseKind::constant;
  double scale = 1.0;

  static NoiseLaw parse(const std::string& name, double scale = 1.0) {
    if (name == "constant") return {NoiseKind::constant, scale};
    if (name == "linear") return {NoiseKind::linear, scale};
    if (name == "sinusoidal") return {NoiseKind::sinusoidal, scale};
    throw ConfigError("unknown noise law '" + name + "' (expected constant, linear or sinusoidal)");
  }

  std::string name() const {
    switch (kind) {
      case NoiseKind::constant: return "constant";
      case NoiseKind::linear: return "linear";
      case NoiseKind::sinusoidal: return "sinusoidal";
    }
    return "?";
  }

  double sigma(double x) const {
    switch (kind) {
      case NoiseKind::constant: return scale;
      case NoiseKind::linear: return scale * (0.1 + std::abs(x));
      case NoiseKind::sinusoidal: return scale * (1.0 + 0.8 * std::sin(x));
    }
    return scale;
  }
};

inline double synth_mean(double x) { return std::sin(x) + 0.5 * x; }

/// x ~ U[-5, 5], y = mu(x) + sigma(x) * eps. Metadata holds mu, sigma,
/// neg_sigma and abs_x.
inline Dataset synth_heteroscedastic(std::size_t n, std::uint64_t seed, NoiseLaw law) {
  if (n < 1) throw ConfigError("synth: n must be at least 1");
  Rng rng(seed);
  Dataset d;
  d.features = Matrix(n, 1);
  d.feature_names = {"x"};
  d.target_name = "y";
  auto& mu = d.metadata["mu"];
  auto& sigma = d.metadata["sigma"];
  auto& neg_sigma = d.metadata["neg_sigma"];
  auto& abs_x = d.metadata["abs_x"];
  for (std::size_t i = 0; i < n; ++i) {
    const double x = rng.uniform(-5.0, 5.0);
    const double eps = rng.normal();
    const double m = synth_mean(x), s = law.sigma(x);
    d.features(i, 0) = x;
    d.targets.push_back(m + s * eps);
    mu.push_back(m);
    sigma.push_back(s);
    neg_sigma.push_back(-s);
    abs_x.push_back(std::abs(x));
    d.ids.push_back("s" + std::to_string(i));
  }
  return d;
}

}  // namespace uqr
