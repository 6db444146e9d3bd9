#pragma once

// Config-driven end-to-end run: load -> cuts -> split -> normalise ->
// features -> regressor -> intervals -> reports. Outputs go to one
// directory owned by the run through a lock file.

#include <fcntl.h>
#include <unistd.h>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "uqr/conformal.hpp"
#include "uqr/core.hpp"
#include "uqr/data.hpp"
#include "uqr/gbrt.hpp"
#include "uqr/interval.hpp"
#include "uqr/metrics.hpp"
#include "uqr/mlp.hpp"

namespace uqr {

namespace fs = std::filesystem;
using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Path-aware JSON reading

namespace detail {

/// A JSON object plus its path, for diagnostics like "split.fractions[1]: ...".
class Node {
 public:
  Node(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + "expected an object");
  }

  const std::string& path() const { return path_; }
  bool has(const char* key) const { return j_.contains(key); }

  /// Rejects keys outside `allowed`.
  void only(std::initializer_list<const char*> allowed) const {
    for (const auto& [k, _] : j_.items()) {
      bool ok = false;
      for (const char* a : allowed) ok = ok || k == a;
      if (!ok) throw ConfigError(child(k) + ": unknown field");
    }
  }

  std::string child(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  Node object(const char* key) const {
    if (!has(key)) throw ConfigError(child(key) + ": required field is missing");
    return Node(j_.at(key), child(key));
  }

  const json& raw(const char* key) const {
    if (!has(key)) throw ConfigError(child(key) + ": required field is missing");
    return j_.at(key);
  }

  double number(const char* key, std::optional<double> fallback = std::nullopt) const {
    if (!has(key)) return require(key, fallback);
    return as_number(j_.at(key), child(key));
  }

  std::uint64_t count(const char* key, std::optional<std::uint64_t> fallback = std::nullopt) const {
    if (!has(key)) return require(key, fallback);
    return as_count(j_.at(key), child(key));
  }

  std::string string(const char* key, std::optional<std::string> fallback = std::nullopt) const {
    if (!has(key)) return require(key, fallback);
    if (!j_.at(key).is_string()) throw ConfigError(child(key) + ": expected a string");
    return j_.at(key).get<std::string>();
  }

  bool boolean(const char* key, std::optional<bool> fallback = std::nullopt) const {
    if (!has(key)) return require(key, fallback);
    if (!j_.at(key).is_boolean()) throw ConfigError(child(key) + ": expected true or false");
    return j_.at(key).get<bool>();
  }

  std::vector<double> numbers(const char* key) const {
    const auto& a = raw(key);
    if (!a.is_array()) throw ConfigError(child(key) + ": expected an array of numbers");
    std::vector<double> out;
    for (std::size_t i = 0; i < a.size(); ++i) out.push_back(as_number(a[i], child(key) + "[" + std::to_string(i) + "]"));
    return out;
  }

  std::vector<std::uint64_t> counts(const char* key) const {
    const auto& a = raw(key);
    if (!a.is_array()) throw ConfigError(child(key) + ": expected an array of counts");
    std::vector<std::uint64_t> out;
    for (std::size_t i = 0; i < a.size(); ++i) out.push_back(as_count(a[i], child(key) + "[" + std::to_string(i) + "]"));
    return out;
  }

  std::vector<std::string> strings(const char* key) const {
    const auto& a = raw(key);
    if (!a.is_array()) throw ConfigError(child(key) + ": expected an array of strings");
    std::vector<std::string> out;
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (!a[i].is_string()) throw ConfigError(child(key) + "[" + std::to_string(i) + "]: expected a string");
      out.push_back(a[i].get<std::string>());
    }
    return out;
  }

  static double as_number(const json& v, const std::string& path) {
    if (!v.is_number()) throw ConfigError(path + ": expected a number");
    const double d = v.get<double>();
    if (!std::isfinite(d)) throw ConfigError(path + ": must be finite");
    return d;
  }

  static std::uint64_t as_count(const json& v, const std::string& path) {
    if (v.is_number_unsigned()) return v.get<std::uint64_t>();
    if (v.is_number_integer()) {
      if (v.get<std::int64_t>() < 0) throw ConfigError(path + ": must not be negative");
      return static_cast<std::uint64_t>(v.get<std::int64_t>());
    }
    throw ConfigError(path + ": expected a non-negative integer");
  }

 private:
  template <class T>
  T require(const char* key, const std::optional<T>& fallback) const {
    if (!fallback) throw ConfigError(child(key) + ": required field is missing");
    return *fallback;
  }

  std::string where() const { return path_.empty() ? "config: " : path_ + ": "; }

  const json& j_;
  std::string path_;
};

/// Re-raises a validation error from a module with the config path in front.
template <class Fn>
void with_prefix(const std::string& prefix, Fn&& fn) {
  try {
    fn();
  } catch (const ConfigError& e) {
    throw ConfigError(prefix + "." + e.what());
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Run configuration

struct MethodSpec {
  Method method = Method::naive;
  IntervalConfig config;
};

struct RegressorSpec {
  BoostingParams mean;
  BoostingParams quantile;  // loss is set per tau at fit time
  bool search = false;
  SearchSpace space;
  std::size_t folds = 10;
  std::size_t iters = 100;
  std::uint64_t search_seed = 0;
};

struct RunConfig {
  std::string data_path, schema_path;
  std::optional<QualityCutSpec> quality_cuts;
  std::array<double, 3> fractions{0.7, 0.2, 0.1};
  std::uint64_t seed = 0;
  std::uint64_t split_seed = 0;
  bool normalize = true;
  bool original_units = true;
  std::optional<MLPConfig> mlp;
  RegressorSpec regressor;
  std::vector<MethodSpec> methods;
  double alpha = 0.1;
  std::vector<double> alphas;
  bool cqr_refit_per_alpha = false;
  std::optional<std::vector<std::string>> width_properties;
  bool write_intervals = true;
  std::string output = "uqr-run";

  static RunConfig from_json(const json& j, const fs::path& base_dir = {}, std::optional<std::uint64_t> seed = {});
  static RunConfig load(const std::string& path, std::optional<std::uint64_t> seed = {});
  json to_json() const;
};

namespace detail {

inline BoostingParams boosting_from(const Node& n, const BoostingParams& base) {
  n.only({"learning_rate", "max_depth", "max_leaf_nodes", "n_estimators", "seed", "preset"});
  BoostingParams p = base;
  if (n.has("preset")) {
    const auto preset = n.string("preset");
    if (preset == "published_mean") {
      p = published_mean_params(base.seed);
    } else if (preset == "published_quantile") {
      p = published_quantile_params(0.5, base.seed);
      p.loss = Loss::squared();
    } else if (preset != "default") {
      throw ConfigError(n.child("preset") + ": expected default, published_mean or published_quantile");
    }
  }
  p.learning_rate = n.number("learning_rate", p.learning_rate);
  if (n.has("max_depth") && n.raw("max_depth").is_string()) {
    if (n.string("max_depth") != "unbounded") throw ConfigError(n.child("max_depth") + ": expected a count or \"unbounded\"");
    p.max_depth = kUnbounded;
  } else {
    p.max_depth = n.count("max_depth", p.max_depth);
  }
  p.max_leaf_nodes = n.count("max_leaf_nodes", p.max_leaf_nodes);
  p.n_estimators = n.count("n_estimators", p.n_estimators);
  p.seed = n.count("seed", p.seed);
  with_prefix(n.path(), [&] { p.validate(); });
  return p;
}

inline json boosting_to_json(const BoostingParams& p) {
  json j{{"learning_rate", p.learning_rate},
         {"max_leaf_nodes", p.max_leaf_nodes},
         {"n_estimators", p.n_estimators},
         {"seed", p.seed}};
  if (p.max_depth == kUnbounded)
    j["max_depth"] = "unbounded";
  else
    j["max_depth"] = p.max_depth;
  return j;
}

inline MLPConfig mlp_from(const Node& n, std::uint64_t seed) {
  n.only({"layer_widths", "dropout_prob", "learning_rate", "weight_decay", "lr_gamma", "lr_step_epochs", "epochs",
          "batch_size", "seed", "adam_beta1", "adam_beta2", "adam_eps"});
  MLPConfig c;
  c.seed = seed;
  if (n.has("layer_widths")) {
    const auto w = n.counts("layer_widths");
    c.layer_widths.assign(w.begin(), w.end());
  }
  c.dropout_prob = n.number("dropout_prob", c.dropout_prob);
  c.learning_rate = n.number("learning_rate", c.learning_rate);
  c.weight_decay = n.number("weight_decay", c.weight_decay);
  c.lr_gamma = n.number("lr_gamma", c.lr_gamma);
  c.lr_step_epochs = n.count("lr_step_epochs", c.lr_step_epochs);
  c.epochs = n.count("epochs", c.epochs);
  c.batch_size = n.count("batch_size", c.batch_size);
  c.seed = n.count("seed", c.seed);
  c.adam_beta1 = n.number("adam_beta1", c.adam_beta1);
  c.adam_beta2 = n.number("adam_beta2", c.adam_beta2);
  c.adam_eps = n.number("adam_eps", c.adam_eps);
  if (!(c.adam_beta1 >= 0 && c.adam_beta1 < 1)) throw ConfigError(n.child("adam_beta1") + ": must lie in [0, 1)");
  if (!(c.adam_beta2 >= 0 && c.adam_beta2 < 1)) throw ConfigError(n.child("adam_beta2") + ": must lie in [0, 1)");
  if (!(c.adam_eps > 0)) throw ConfigError(n.child("adam_eps") + ": must be positive");
  try {
    c.validate();
  } catch (const ConfigError& e) {
    // Module messages start with "mlp."; rebase onto the config path.
    std::string msg = e.what();
    if (msg.starts_with("mlp.")) msg = msg.substr(4);
    throw ConfigError(n.path() + "." + msg);
  }
  return c;
}

inline QualityCutSpec cuts_from(const Node& n) {
  n.only({"min_flux_snr", "log_lum_range", "min_pixel_snr", "max_mass_err", "max_width_err", "lines",
          "pixel_snr_column"});
  QualityCutSpec s;
  s.min_flux_snr = n.number("min_flux_snr", s.min_flux_snr);
  if (n.has("log_lum_range")) {
    const auto r = n.numbers("log_lum_range");
    if (r.size() != 2) throw ConfigError(n.child("log_lum_range") + ": expected [low, high]");
    s.log_lum_range = {r[0], r[1]};
  }
  s.min_pixel_snr = n.number("min_pixel_snr", s.min_pixel_snr);
  s.max_mass_err = n.number("max_mass_err", s.max_mass_err);
  s.max_width_err = n.number("max_width_err", s.max_width_err);
  if (n.has("lines")) s.lines = n.strings("lines");
  s.pixel_snr_column = n.string("pixel_snr_column", s.pixel_snr_column);
  try {
    s.validate();
  } catch (const ConfigError& e) {
    std::string msg = e.what();
    if (msg.starts_with("quality_cuts")) msg = msg.substr(std::string("quality_cuts").size());
    if (msg.starts_with(".")) msg = msg.substr(1);
    throw ConfigError(n.path() + (msg.starts_with(":") ? "" : ".") + msg);
  }
  return s;
}

inline SearchSpace space_from(const Node& n) {
  n.only({"learning_rate", "max_depth", "max_leaf_nodes", "n_estimators"});
  SearchSpace s;
  auto range = [&](const char* key, auto& lo, auto& hi) {
    if (!n.has(key)) return;
    using T = std::decay_t<decltype(lo)>;
    if constexpr (std::is_floating_point_v<T>) {
      const auto r = n.numbers(key);
      if (r.size() != 2) throw ConfigError(n.child(key) + ": expected [low, high]");
      lo = r[0];
      hi = r[1];
    } else {
      const auto r = n.counts(key);
      if (r.size() != 2) throw ConfigError(n.child(key) + ": expected [low, high]");
      lo = r[0];
      hi = r[1];
    }
  };
  range("learning_rate", s.lr_lo, s.lr_hi);
  range("max_depth", s.depth_lo, s.depth_hi);
  range("max_leaf_nodes", s.leaves_lo, s.leaves_hi);
  range("n_estimators", s.estimators_lo, s.estimators_hi);
  try {
    s.validate();
  } catch (const ConfigError& e) {
    std::string msg = e.what();
    if (msg.starts_with("search.")) msg = msg.substr(7);
    throw ConfigError(n.path() + "." + msg);
  }
  return s;
}

inline Aggregation parse_aggregation(const std::string& s, const std::string& path) {
  if (s == "mean") return Aggregation::mean;
  if (s == "median") return Aggregation::median;
  throw ConfigError(path + ": expected mean or median");
}

inline fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() || base.empty() ? path : base / path;
}

}  // namespace detail

inline RunConfig RunConfig::from_json(const json& j, const fs::path& base_dir, std::optional<std::uint64_t> seed) {
  using detail::Node;
  const Node root(j, "");
  root.only({"data", "quality_cuts", "split", "seed", "normalize", "units", "features", "regressor", "methods",
             "alpha", "alphas", "cqr_refit_per_alpha", "width_properties", "write_intervals", "output"});
  RunConfig c;
  c.seed = seed ? *seed : root.count("seed", 0);

  const Node data = root.object("data");
  data.only({"path", "schema"});
  c.data_path = detail::resolve(base_dir, data.string("path")).string();
  c.schema_path = detail::resolve(base_dir, data.string("schema")).string();
  if (!fs::is_regular_file(c.data_path)) throw ConfigError("data.path: file '" + c.data_path + "' does not exist");
  if (!fs::is_regular_file(c.schema_path))
    throw ConfigError("data.schema: file '" + c.schema_path + "' does not exist");

  if (root.has("quality_cuts")) c.quality_cuts = detail::cuts_from(root.object("quality_cuts"));

  c.split_seed = c.seed;
  if (root.has("split")) {
    const Node s = root.object("split");
    s.only({"fractions", "seed"});
    if (s.has("fractions")) {
      const auto f = s.numbers("fractions");
      if (f.size() != 3) throw ConfigError("split.fractions: expected [train, calibration, test]");
      for (std::size_t i = 0; i < 3; ++i)
        if (!(f[i] > 0)) throw ConfigError("split.fractions[" + std::to_string(i) + "]: must be positive");
      if (std::abs(f[0] + f[1] + f[2] - 1.0) > 1e-9) throw ConfigError("split.fractions: must sum to 1");
      c.fractions = {f[0], f[1], f[2]};
    }
    c.split_seed = s.count("seed", c.seed);
  }

  c.normalize = root.boolean("normalize", true);
  const auto units = root.string("units", "original");
  if (units != "original" && units != "normalized") throw ConfigError("units: expected original or normalized");
  c.original_units = units == "original";

  if (root.has("features")) {
    const Node f = root.object("features");
    f.only({"kind", "mlp"});
    const auto kind = f.string("kind", "passthrough");
    if (kind == "mlp") {
      c.mlp = f.has("mlp") ? detail::mlp_from(f.object("mlp"), c.seed) : MLPConfig{};
      if (!f.has("mlp")) c.mlp->seed = c.seed;
    } else if (kind != "passthrough") {
      throw ConfigError("features.kind: expected passthrough or mlp");
    } else if (f.has("mlp")) {
      throw ConfigError("features.mlp: only allowed with kind \"mlp\"");
    }
  }

  c.regressor.mean.seed = c.regressor.quantile.seed = c.seed;
  if (root.has("regressor")) {
    const Node r = root.object("regressor");
    r.only({"mean", "quantile", "search"});
    if (r.has("mean")) c.regressor.mean = detail::boosting_from(r.object("mean"), c.regressor.mean);
    if (r.has("quantile")) c.regressor.quantile = detail::boosting_from(r.object("quantile"), c.regressor.quantile);
    if (r.has("search")) {
      const Node s = r.object("search");
      s.only({"folds", "iters", "seed", "space"});
      c.regressor.search = true;
      c.regressor.folds = s.count("folds", 10);
      c.regressor.iters = s.count("iters", 100);
      c.regressor.search_seed = s.count("seed", c.seed);
      if (c.regressor.folds < 2) throw ConfigError("regressor.search.folds: must be at least 2");
      if (c.regressor.iters < 1) throw ConfigError("regressor.search.iters: must be at least 1");
      if (s.has("space")) c.regressor.space = detail::space_from(s.object("space"));
    }
  }

  c.alpha = root.number("alpha", 0.1);
  if (!(c.alpha > 0 && c.alpha < 1)) throw ConfigError("alpha: must lie inside (0, 1)");
  if (root.has("alphas")) {
    if (root.raw("alphas").is_string()) {
      if (root.string("alphas") != "default") throw ConfigError("alphas: expected an array or \"default\"");
      c.alphas = default_alpha_grid();
    } else {
      c.alphas = root.numbers("alphas");
    }
    validate_alpha_grid(c.alphas);
  } else {
    c.alphas = {c.alpha};
  }

  const auto& methods = root.raw("methods");
  if (!methods.is_array() || methods.empty()) throw ConfigError("methods: expected a non-empty array");
  std::set<std::string> seen;
  for (std::size_t i = 0; i < methods.size(); ++i) {
    const std::string path = "methods[" + std::to_string(i) + "]";
    MethodSpec m;
    m.config.seed = c.seed;
    m.config.alpha = c.alpha;
    if (methods[i].is_string()) {
      try {
        m.method = parse_method(methods[i].get<std::string>());
      } catch (const ConfigError& e) {
        throw ConfigError(path + ": " + e.what());
      }
    } else {
      const Node n(methods[i], path);
      n.only({"method", "K", "aggregation", "seed", "max_resample_attempts"});
      try {
        m.method = parse_method(n.string("method"));
      } catch (const ConfigError& e) {
        const std::string msg = e.what();
        throw ConfigError(msg.starts_with(path) ? msg : n.child("method") + ": " + msg);
      }
      m.config.K = n.count("K", m.config.K);
      m.config.aggregation = detail::parse_aggregation(n.string("aggregation", "mean"), n.child("aggregation"));
      m.config.seed = n.count("seed", m.config.seed);
      m.config.max_resample_attempts = n.count("max_resample_attempts", m.config.max_resample_attempts);
    }
    m.config.method = m.method;
    detail::with_prefix(path, [&] { m.config.validate(); });
    if (!seen.insert(std::string(method_name(m.method))).second)
      throw ConfigError(path + ": method '" + std::string(method_name(m.method)) + "' is listed twice");
    c.methods.push_back(m);
  }

  c.cqr_refit_per_alpha = root.boolean("cqr_refit_per_alpha", false);
  if (root.has("width_properties")) c.width_properties = root.strings("width_properties");
  c.write_intervals = root.boolean("write_intervals", true);
  c.output = root.string("output", c.output);
  if (c.output.empty()) throw ConfigError("output: must not be empty");
  return c;
}

inline RunConfig RunConfig::load(const std::string& path, std::optional<std::uint64_t> seed) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config '" + path + "': " + e.what());
  }
  return from_json(j, fs::path(path).parent_path(), seed);
}

inline json RunConfig::to_json() const {
  json methods_j = json::array();
  for (const auto& m : methods)
    methods_j.push_back({{"method", method_name(m.method)},
                         {"K", m.config.K},
                         {"aggregation", m.config.aggregation == Aggregation::mean ? "mean" : "median"},
                         {"seed", m.config.seed},
                         {"max_resample_attempts", m.config.max_resample_attempts}});
  json j{{"data", {{"path", data_path}, {"schema", schema_path}}},
         {"split", {{"fractions", fractions}, {"seed", split_seed}}},
         {"seed", seed},
         {"normalize", normalize},
         {"units", original_units ? "original" : "normalized"},
         {"regressor", {{"mean", detail::boosting_to_json(regressor.mean)},
                        {"quantile", detail::boosting_to_json(regressor.quantile)}}},
         {"methods", methods_j},
         {"alpha", alpha},
         {"alphas", alphas},
         {"cqr_refit_per_alpha", cqr_refit_per_alpha},
         {"write_intervals", write_intervals},
         {"output", output}};
  if (regressor.search) {
    const auto& s = regressor.space;
    j["regressor"]["search"] = {{"folds", regressor.folds},
                                {"iters", regressor.iters},
                                {"seed", regressor.search_seed},
                                {"space",
                                 {{"learning_rate", {s.lr_lo, s.lr_hi}},
                                  {"max_depth", {s.depth_lo, s.depth_hi}},
                                  {"max_leaf_nodes", {s.leaves_lo, s.leaves_hi}},
                                  {"n_estimators", {s.estimators_lo, s.estimators_hi}}}}};
  }
  if (mlp) j["features"] = {{"kind", "mlp"}, {"mlp", config_to_json(*mlp)}};
  else j["features"] = {{"kind", "passthrough"}};
  if (quality_cuts) {
    const auto& q = *quality_cuts;
    j["quality_cuts"] = {{"min_flux_snr", q.min_flux_snr},   {"log_lum_range", q.log_lum_range},
                         {"min_pixel_snr", q.min_pixel_snr}, {"max_mass_err", q.max_mass_err},
                         {"max_width_err", q.max_width_err}, {"lines", q.lines},
                         {"pixel_snr_column", q.pixel_snr_column}};
  }
  if (width_properties) j["width_properties"] = *width_properties;
  return j;
}

/// Output directory: --out wins, then UQR_OUTPUT_ROOT for relative paths.
inline fs::path resolve_output(const RunConfig& c, const std::optional<std::string>& out_override) {
  if (out_override) return fs::path(*out_override);
  fs::path p(c.output);
  if (p.is_relative())
    if (const char* root = std::getenv("UQR_OUTPUT_ROOT"); root && *root) return fs::path(root) / p;
  return p;
}

// ---------------------------------------------------------------------------
// Running

struct RunResult {
  fs::path out_dir;
  std::vector<EvalReport> reports;  // one per method at the configured alpha
  SweepTable sweep;
  json manifest;
};

inline constexpr const char* kManifestFile = "manifest.json";
inline constexpr const char* kReportsFile = "reports.csv";
inline constexpr const char* kSweepFile = "sweep.csv";
inline constexpr const char* kWidthFile = "width_properties.csv";
inline constexpr const char* kIntervalsDir = "intervals";
inline constexpr const char* kMlpFile = "mlp_checkpoint.json";
inline constexpr const char* kSummaryFile = "summary.csv";
inline constexpr const char* kLockFile = ".uqr.lock";

inline std::string interval_file_name(Method m, double alpha) {
  return std::string(method_name(m)) + "_alpha" + format_double(alpha) + ".csv";
}

inline void write_interval_csv(const fs::path& path, const IntervalBatch& b, const std::vector<std::string>& ids) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << "id,point,lower,upper,alpha,method\n";
  const auto name = method_name(b.method);
  for (std::size_t i = 0; i < b.size(); ++i)
    out << (i < ids.size() ? detail::quote_csv(ids[i]) : std::to_string(i)) << ',' << format_double(b.point[i])
        << ',' << format_double(b.lower[i]) << ',' << format_double(b.upper[i]) << ',' << format_double(b.alpha)
        << ',' << name << '\n';
}

namespace detail {

class DirLock {
 public:
  explicit DirLock(const fs::path& dir) : path_(dir / kLockFile) {
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0) throw ConfigError("output directory '" + dir.string() + "' is locked by another run (" + path_.string() + ")");
    const auto pid = std::to_string(::getpid()) + "\n";
    [[maybe_unused]] auto n = ::write(fd, pid.data(), pid.size());
    ::close(fd);
  }
  ~DirLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  fs::path path_;
};

inline void write_text(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw DataError("cannot write '" + p.string() + "'");
  out << s;
}

inline void remove_outputs(const fs::path& dir) {
  std::error_code ec;
  for (const char* f : {kReportsFile, kSweepFile, kWidthFile, kMlpFile, kSummaryFile}) fs::remove(dir / f, ec);
  fs::remove_all(dir / kIntervalsDir, ec);
}

template <class E>
[[noreturn]] void rethrow_in_stage(const std::string& stage, const E& e) {
  throw E("stage '" + stage + "': " + e.what());
}

inline json decision_header(const RunConfig& c) {
  return {{"quantile_rank", "k = ceil((1 - alpha)(n + 1)); +inf when k > n"},
          {"interval_bounds", "closed; unbounded sides stored as -inf/+inf and excluded from MPIW"},
          {"cqr_sweep", c.cqr_refit_per_alpha ? "quantile models refitted at every alpha"
                                              : "quantile models fitted once at alpha, recalibrated per level"},
          {"cqr_crossing", "crossed quantile predictions swapped before scoring"},
          {"jackknife_resampling", "full redraw until every index is out-of-bag at least once"},
          {"aggregation_default", "mean"},
          {"scheduler_unit", "epoch"},
          {"mlp_init", "W ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), b = 0"},
          {"adam", {{"beta1", c.mlp ? c.mlp->adam_beta1 : 0.9},
                    {"beta2", c.mlp ? c.mlp->adam_beta2 : 0.999},
                    {"eps", c.mlp ? c.mlp->adam_eps : 1e-8},
                    {"weight_decay", "coupled L2 gradient term"}}},
          {"dropout", "inverted, on every hidden layer"},
          {"normalisation", "training-split min/max reused for calibration and test"},
          {"split_rounding", "largest remainder"},
          {"rng", kRngName}};
}

}  // namespace detail

/// Executes the configured run. On failure the outputs are removed, the
/// manifest records the failing stage, and the error is rethrown with the
/// stage name in front.
inline RunResult run(const RunConfig& cfg, const std::optional<std::string>& out_override = std::nullopt) {
  using clock = std::chrono::steady_clock;
  RunResult res;
  res.out_dir = resolve_output(cfg, out_override);
  fs::create_directories(res.out_dir);
  detail::DirLock lock(res.out_dir);
  detail::remove_outputs(res.out_dir);

  json& man = res.manifest;
  man["tool"] = "uqr";
  man["version"] = kVersion;
  man["status"] = "running";
  man["config"] = cfg.to_json();
  man["decisions"] = detail::decision_header(cfg);
  man["timings_s"] = json::object();
  const auto manifest_path = res.out_dir / kManifestFile;
  auto flush_manifest = [&] { detail::write_text(manifest_path, man.dump(2) + "\n"); };

  std::string stage;
  auto t0 = clock::now();
  auto begin = [&](const char* name) {
    stage = name;
    t0 = clock::now();
  };
  auto end = [&] { man["timings_s"][stage] = std::chrono::duration<double>(clock::now() - t0).count(); };

  auto fail = [&](const std::exception& e) {
    detail::remove_outputs(res.out_dir);
    man["status"] = "failed";
    man["failed_stage"] = stage;
    man["error"] = e.what();
    try {
      flush_manifest();
    } catch (...) {
    }
  };

  try {
    begin("load");
    man["inputs"] = {{"data", {{"path", cfg.data_path}, {"hash", hash_file(cfg.data_path)}}},
                     {"schema", {{"path", cfg.schema_path}, {"hash", hash_file(cfg.schema_path)}}}};
    man["config_hash"] = "fnv1a64:" + [&] {
      char buf[17];
      std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(cfg.to_json().dump())));
      return std::string(buf);
    }();
    const auto schema = Schema::load(cfg.schema_path);
    auto loaded = load_csv(cfg.data_path, schema);
    man["rows"] = {{"read", loaded.rows_read}, {"dropped_non_finite", loaded.rows_dropped}};
    Dataset data = std::move(loaded.data);
    end();

    if (cfg.quality_cuts) {
      begin("quality_cuts");
      auto cut = apply_quality_cuts(data, *cfg.quality_cuts);
      json steps = json::array();
      for (const auto& s : cut.steps) steps.push_back({{"criterion", s.criterion}, {"survivors", s.survivors}});
      man["quality_cuts"] = steps;
      data = std::move(cut.data);
      end();
    }

    begin("split");
    const auto idx = split(data.size(), cfg.fractions, cfg.split_seed);
    Dataset train = data.subset(idx.train), cal = data.subset(idx.calibration), test = data.subset(idx.test);
    const std::vector<double> test_y_original = test.targets;
    man["split"] = {{"train", train.size()}, {"calibration", cal.size()}, {"test", test.size()}};
    end();

    NormalizationState norm;
    if (cfg.normalize) {
      begin("normalize");
      norm = NormalizationState::fit(train);
      train = norm.apply(train);
      cal = norm.apply(cal);
      test = norm.apply(test);
      man["normalization"] = {{"target_min", norm.target_min}, {"target_max", norm.target_max}};
      end();
    }

    if (cfg.mlp) {
      begin("features");
      auto mc = *cfg.mlp;
      if (mc.input_width() != train.n_features())
        throw ConfigError("features.mlp.layer_widths[0]: is " + std::to_string(mc.input_width()) +
                          " but the data has " + std::to_string(train.n_features()) + " feature columns");
      auto [model, trace] = mlp_train(mlp_init(mc), train, cal, mc);
      save_checkpoint((res.out_dir / kMlpFile).string(), model);
      man["mlp"] = {{"epochs", trace.train_loss.size()},
                    {"final_train_mse", trace.train_loss.empty() ? json(nullptr) : json(trace.train_loss.back())},
                    {"final_val_mse", trace.val_loss.empty() ? json(nullptr) : json(trace.val_loss.back())},
                    {"steps", model.step}};
      std::vector<std::string> names;
      for (std::size_t k = 0; k < mc.feature_width(); ++k) names.push_back("f" + std::to_string(k));
      for (Dataset* d : {&train, &cal, &test}) {
        d->features = mlp_extract(model, *d);
        d->feature_names = names;
      }
      end();
    }

    begin("regressor");
    BoostingParams mean_p = cfg.regressor.mean, quant_p = cfg.regressor.quantile;
    if (cfg.regressor.search) {
      const auto& r = cfg.regressor;
      auto sm = random_search_cv(train.features, train.targets, r.space, r.folds, r.iters, Loss::squared(),
                                 r.search_seed);
      auto sq = random_search_cv(train.features, train.targets, r.space, r.folds, r.iters,
                                 Loss::pinball(1.0 - cfg.alpha / 2), r.search_seed);
      mean_p = sm.best;
      quant_p = sq.best;
      quant_p.loss = Loss::squared();
      man["search"] = {{"mean", {{"best", detail::boosting_to_json(mean_p)},
                                 {"cv_rmse_mean", sm.score.rmse_stats().mean},
                                 {"cv_rmse_std", sm.score.rmse_stats().std},
                                 {"cv_mae_mean", sm.score.mae_stats().mean},
                                 {"cv_mae_std", sm.score.mae_stats().std}}},
                       {"quantile", {{"best", detail::boosting_to_json(quant_p)},
                                     {"tau", 1.0 - cfg.alpha / 2},
                                     {"cv_pinball_mean", sq.score.loss_stats().mean}}}};
    }
    man["regressor"] = {{"mean", detail::boosting_to_json(mean_p)}, {"quantile", detail::boosting_to_json(quant_p)}};
    auto mean_factory = [mean_p](const Matrix& X, std::span<const double> y) { return fit(X, y, mean_p); };
    auto quantile_factory = [quant_p](const Matrix& X, std::span<const double> y, double tau) {
      auto p = quant_p;
      p.loss = Loss::pinball(tau);
      return fit(X, y, p);
    };
    end();

    begin("intervals");
    std::map<Method, NaiveCalibration> naive_c;
    std::map<Method, JackknifeABCalibration> jk_c;
    std::map<std::pair<std::size_t, std::uint64_t>, CVCalibration> cv_c;  // shared across the CV family
    std::map<Method, const CVCalibration*> cv_of;
    std::optional<CQRCalibration> cqr_c;
    std::map<double, CQRCalibration> cqr_refit;
    const MethodSpec* cqr_spec = nullptr;
    json method_info = json::object();
    for (const auto& m : cfg.methods) {
      const auto name = std::string(method_name(m.method));
      switch (m.method) {
        case Method::naive:
          naive_c.emplace(m.method, calibrate_naive(train.features, train.targets, test.features, mean_factory));
          break;
        case Method::jackknife_plus_ab: {
          auto c = calibrate_jackknife_plus_ab(train.features, train.targets, test.features, mean_factory, m.config);
          method_info[name] = {{"resample_attempts", c.attempts}};
          jk_c.emplace(m.method, std::move(c));
          break;
        }
        case Method::cv:
        case Method::cv_plus:
        case Method::cv_minmax: {
          const auto key = std::make_pair(m.config.K, m.config.seed);
          auto it = cv_c.find(key);
          if (it == cv_c.end())
            it = cv_c.emplace(key, calibrate_cv(train.features, train.targets, test.features, mean_factory, m.config))
                     .first;
          cv_of[m.method] = &it->second;
          break;
        }
        case Method::cqr:
          cqr_spec = &m;
          if (!cfg.cqr_refit_per_alpha) {
            cqr_c = calibrate_cqr(train.features, train.targets, cal.features, cal.targets, test.features,
                                  quantile_factory, m.config);
            method_info[name] = {{"crossed_predictions", cqr_c->crossed}, {"fitted_alpha", cqr_c->fitted_alpha}};
          }
          break;
      }
    }
    auto intervals_at = [&](Method m, double a) -> IntervalBatch {
      IntervalBatch b;
      switch (m) {
        case Method::naive: b = naive_c.at(m).at(a); break;
        case Method::jackknife_plus_ab: b = jk_c.at(m).at(a); break;
        case Method::cqr:
          if (cqr_c) {
            b = cqr_c->at(a);
          } else {
            auto it = cqr_refit.find(a);
            if (it == cqr_refit.end()) {
              auto c = cqr_spec->config;
              c.alpha = a;
              it = cqr_refit
                       .emplace(a, calibrate_cqr(train.features, train.targets, cal.features, cal.targets,
                                                 test.features, quantile_factory, c))
                       .first;
            }
            b = it->second.at(a);
          }
          break;
        default: b = cv_of.at(m)->at(m, a);
      }
      if (cfg.normalize && cfg.original_units) b = b.rescaled(norm.target_range(), norm.target_min);
      return b;
    };
    const auto& eval_y = cfg.normalize && cfg.original_units ? test_y_original : test.targets;
    if (!method_info.empty()) man["methods"] = method_info;
    end();

    begin("reports");
    std::vector<Method> methods;
    for (const auto& m : cfg.methods) methods.push_back(m.method);
    if (cfg.write_intervals) fs::create_directories(res.out_dir / kIntervalsDir);
    std::map<Method, IntervalBatch> primary;
    res.sweep = coverage_sweep(methods, cfg.alphas, eval_y, [&](Method m, double a) {
      auto b = intervals_at(m, a);
      if (cfg.write_intervals) write_interval_csv(res.out_dir / kIntervalsDir / interval_file_name(m, a), b, test.ids);
      if (a == cfg.alpha) primary[m] = b;
      return b;
    });
    for (std::size_t k = 0; k < methods.size(); ++k) {
      const auto m = methods[k];
      if (!primary.count(m)) {
        primary[m] = intervals_at(m, cfg.alpha);
        if (cfg.write_intervals)
          write_interval_csv(res.out_dir / kIntervalsDir / interval_file_name(m, cfg.alpha), primary[m], test.ids);
      }
      auto r = evaluate(eval_y, primary[m]);
      r.r2_coverage = res.sweep.rows[k * cfg.alphas.size()].r2_coverage;
      res.reports.push_back(r);
    }
    {
      std::ostringstream out;
      write_reports_csv(out, res.reports);
      detail::write_text(res.out_dir / kReportsFile, out.str());
    }
    {
      std::ostringstream out;
      write_reports_csv(out, res.sweep.rows);
      detail::write_text(res.out_dir / kSweepFile, out.str());
    }
    {
      std::vector<std::string> props;
      if (cfg.width_properties) {
        props = *cfg.width_properties;
      } else {
        for (const auto& [k, _] : test.metadata) props.push_back(k);
      }
      std::ostringstream out;
      out << "method,property,rho,p_value,n,status\n";
      for (auto m : methods) write_width_property_csv(out, m, width_property_report(primary[m], test.metadata, props));
      detail::write_text(res.out_dir / kWidthFile, out.str());
    }
    json outputs = json::object();
    for (const char* f : {kReportsFile, kSweepFile, kWidthFile})
      outputs[f] = hash_file((res.out_dir / f).string());
    outputs["rows"] = {{"reports", res.reports.size()}, {"sweep", res.sweep.rows.size()}};
    man["outputs"] = outputs;
    end();
  } catch (const ConfigError& e) {
    fail(e);
    detail::rethrow_in_stage(stage, e);
  } catch (const DataError& e) {
    fail(e);
    detail::rethrow_in_stage(stage, e);
  } catch (const NumericError& e) {
    fail(e);
    detail::rethrow_in_stage(stage, e);
  } catch (const std::exception& e) {
    fail(e);
    throw Error("stage '" + stage + "': " + e.what());
  }

  man["status"] = "complete";
  flush_manifest();
  return res;
}

// ---------------------------------------------------------------------------
// Consolidated report

struct SummarySection {
  std::string method;
  std::vector<std::vector<std::string>> rows;  // sweep.csv fields
};

struct Summary {
  std::vector<std::string> header;
  std::vector<SummarySection> sections;
  std::size_t row_count() const {
    std::size_t n = 0;
    for (const auto& s : sections) n += s.rows.size();
    return n;
  }
};

/// Reads a completed run directory and groups its sweep rows by method.
/// Writes summary.csv (method-grouped) next to the inputs.
inline Summary report(const fs::path& dir) {
  const auto man_path = dir / kManifestFile;
  std::ifstream in(man_path);
  if (!in) throw DataError("'" + man_path.string() + "' is missing; not a run directory");
  json man;
  try {
    in >> man;
  } catch (const json::exception& e) {
    throw DataError("'" + man_path.string() + "': " + e.what());
  }
  if (man.value("status", "") != "complete")
    throw DataError("run in '" + dir.string() + "' is incomplete (status: " + man.value("status", "unknown") + ")");
  const auto sweep_path = dir / kSweepFile;
  std::ifstream sw(sweep_path);
  if (!sw) throw DataError("'" + sweep_path.string() + "' is missing; incomplete run");
  std::string line;
  Summary s;
  if (!std::getline(sw, line)) throw DataError("'" + sweep_path.string() + "' is empty");
  s.header = detail::split_csv_line(line);
  std::map<std::string, std::size_t> where;
  while (std::getline(sw, line)) {
    if (line.empty()) continue;
    auto fields = detail::split_csv_line(line);
    if (fields.size() != s.header.size()) throw DataError("'" + sweep_path.string() + "': malformed row");
    auto [it, fresh] = where.emplace(fields[0], s.sections.size());
    if (fresh) s.sections.push_back({fields[0], {}});
    s.sections[it->second].rows.push_back(std::move(fields));
  }
  std::ofstream out(dir / kSummaryFile);
  for (std::size_t k = 0; k < s.header.size(); ++k) out << (k ? "," : "") << s.header[k];
  out << '\n';
  for (const auto& sec : s.sections)
    for (const auto& r : sec.rows) {
      for (std::size_t k = 0; k < r.size(); ++k) out << (k ? "," : "") << r[k];
      out << '\n';
    }
  return s;
}

/// Plain-text rendering of a summary, one section per method.
inline std::string render_summary(const Summary& s) {
  std::ostringstream out;
  for (const auto& sec : s.sections) {
    out << "== " << sec.method << " (" << sec.rows.size() << " level" << (sec.rows.size() == 1 ? "" : "s") << ")\n";
    for (std::size_t k = 1; k < s.header.size(); ++k) out << (k > 1 ? "\t" : "") << s.header[k];
    out << '\n';
    for (const auto& r : sec.rows) {
      for (std::size_t k = 1; k < r.size(); ++k) out << (k > 1 ? "\t" : "") << r[k];
      out << '\n';
    }
  }
  return out.str();
}

}  // namespace uqr
