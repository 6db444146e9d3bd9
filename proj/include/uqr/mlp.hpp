#pragma once

// Fully connected regression network used as a supervised feature
// extractor: ReLU hidden layers with (inverted) dropout, a sigmoid output,
// and the penultimate layer exposed as features. Trained with Adam on MSE
// plus coupled L2 weight decay; the learning rate is multiplied by gamma
// every `lr_step_epochs` epochs.
//
// Initialisation: W ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)) drawn row-major per
// layer from Rng(seed); biases start at zero.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "uqr/core.hpp"
#include "uqr/data.hpp"
#include "uqr/rng.hpp"

namespace uqr {

struct MLPConfig {
  std::vector<std::size_t> layer_widths{1000, 64, 64, 8, 1};
  double dropout_prob = 0.1;
  double learning_rate = 5e-4;
  double weight_decay = 1e-6;
  double lr_gamma = 0.5;
  std::size_t lr_step_epochs = 2;
  std::size_t epochs = 100;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const {
    if (layer_widths.size() < 3) throw ConfigError("mlp.layer_widths: need input, at least one hidden, and output");
    for (auto w : layer_widths)
      if (w < 1) throw ConfigError("mlp.layer_widths: every width must be at least 1");
    if (layer_widths.back() != 1) throw ConfigError("mlp.layer_widths: output width must be 1");
    if (!(dropout_prob >= 0 && dropout_prob < 1)) throw ConfigError("mlp.dropout_prob: must lie in [0, 1)");
    if (!(learning_rate > 0)) throw ConfigError("mlp.learning_rate: must be positive");
    if (!(weight_decay >= 0)) throw ConfigError("mlp.weight_decay: must be non-negative");
    if (!(lr_gamma > 0)) throw ConfigError("mlp.lr_gamma: must be positive");
    if (lr_step_epochs < 1) throw ConfigError("mlp.lr_step_epochs: must be at least 1");
    if (batch_size < 1) throw ConfigError("mlp.batch_size: must be at least 1");
  }

  std::size_t input_width() const { return layer_widths.front(); }
  std::size_t feature_width() const { return layer_widths[layer_widths.size() - 2]; }
  std::size_t n_layers() const { return layer_widths.size() - 1; }

  double rate_for_epoch(std::size_t epoch) const {
    return learning_rate * std::pow(lr_gamma, static_cast<double>(epoch / lr_step_epochs));
  }
};

/// Parameter-shaped tensors: weights are (in x out), biases (out).
struct ParamSet {
  std::vector<Matrix> W;
  std::vector<std::vector<double>> b;

  static ParamSet zeros_like(const std::vector<std::size_t>& widths) {
    ParamSet p;
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
      p.W.emplace_back(widths[l], widths[l + 1], 0.0);
      p.b.emplace_back(widths[l + 1], 0.0);
    }
    return p;
  }

  template <class Fn>
  void for_each(Fn&& fn) {
    for (auto& w : W)
      for (auto& x : w.data()) fn(x);
    for (auto& v : b)
      for (auto& x : v) fn(x);
  }

  template <class Fn>
  void for_each(Fn&& fn) const {
    for (const auto& w : W)
      for (double x : w.data()) fn(x);
    for (const auto& v : b)
      for (double x : v) fn(x);
  }

  bool operator==(const ParamSet&) const = default;
};

struct MLPModel {
  MLPConfig config;
  ParamSet params;
  ParamSet adam_m, adam_v;
  std::uint64_t step = 0;

  bool all_finite() const {
    bool ok = true;
    params.for_each([&](double x) { ok = ok && std::isfinite(x); });
    return ok;
  }
};

struct TrainTrace {
  std::vector<double> train_loss, val_loss;
};

enum class Mode { train, eval };

inline MLPModel mlp_init(const MLPConfig& config) {
  config.validate();
  MLPModel m;
  m.config = config;
  m.params = ParamSet::zeros_like(config.layer_widths);
  m.adam_m = m.adam_v = m.params;
  Rng rng(config.seed);
  for (auto& W : m.params.W) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(W.rows()));
    for (auto& x : W.data()) x = rng.uniform(-bound, bound);
  }
  return m;
}

namespace detail {

inline double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

/// Z = A W + b, row by row so results never depend on batch composition.
inline Matrix affine(const Matrix& A, const Matrix& W, const std::vector<double>& b) {
  Matrix Z(A.rows(), W.cols());
  for (std::size_t i = 0; i < A.rows(); ++i) {
    auto z = Z.row(i);
    std::copy(b.begin(), b.end(), z.begin());
    auto a = A.row(i);
    for (std::size_t k = 0; k < A.cols(); ++k) {
      const double ak = a[k];
      if (ak == 0.0) continue;
      auto w = W.row(k);
      for (std::size_t j = 0; j < z.size(); ++j) z[j] += ak * w[j];
    }
  }
  return Z;
}

}  // namespace detail

/// Activations kept for backpropagation.
struct ForwardPass {
  std::vector<Matrix> pre;    // per layer, before activation
  std::vector<Matrix> act;    // act[0] = input; act[l+1] = output of layer l (after dropout)
  std::vector<Matrix> masks;  // per hidden layer; keep-scale factors (0 or 1/(1-p))
  std::vector<double> predictions;

  const Matrix& features() const { return act[act.size() - 2]; }
};

/// `rng` drives dropout in train mode; eval mode (or a null rng) disables it.
inline ForwardPass mlp_forward_pass(const MLPModel& model, const Matrix& batch, Mode mode, Rng* rng) {
  const auto& cfg = model.config;
  if (batch.cols() != cfg.input_width())
    throw DataError("mlp: input width " + std::to_string(batch.cols()) + " does not match " +
                    std::to_string(cfg.input_width()));
  const bool dropout = mode == Mode::train && rng != nullptr && cfg.dropout_prob > 0;
  const double keep_scale = 1.0 / (1.0 - cfg.dropout_prob);
  ForwardPass fp;
  fp.act.push_back(batch);
  const auto L = cfg.n_layers();
  for (std::size_t l = 0; l < L; ++l) {
    Matrix z = detail::affine(fp.act.back(), model.params.W[l], model.params.b[l]);
    Matrix a = z;
    if (l + 1 < L) {
      for (auto& x : a.data()) x = x > 0 ? x : 0.0;
      Matrix mask;
      if (dropout) {
        mask = Matrix(a.rows(), a.cols());
        for (std::size_t t = 0; t < a.data().size(); ++t) {
          mask.data()[t] = rng->bernoulli(cfg.dropout_prob) ? 0.0 : keep_scale;
          a.data()[t] *= mask.data()[t];
        }
      }
      fp.masks.push_back(std::move(mask));
    } else {
      for (auto& x : a.data()) x = detail::sigmoid(x);
    }
    fp.pre.push_back(std::move(z));
    fp.act.push_back(std::move(a));
  }
  fp.predictions = fp.act.back().data();
  return fp;
}

struct ForwardResult {
  std::vector<double> predictions;
  Matrix features;
};

inline ForwardResult mlp_forward(const MLPModel& model, const Matrix& batch, Mode mode, Rng* rng = nullptr) {
  auto fp = mlp_forward_pass(model, batch, mode, rng);
  return {std::move(fp.predictions), fp.features()};
}

/// Gradient of mean squared error and of the (weight_decay / 2) * |theta|^2
/// penalty, kept apart; total() is their sum.
struct MLPGradients {
  ParamSet data, decay;
  double mse = 0;

  ParamSet total() const {
    ParamSet t = data;
    for (std::size_t l = 0; l < t.W.size(); ++l) {
      for (std::size_t k = 0; k < t.W[l].data().size(); ++k) t.W[l].data()[k] += decay.W[l].data()[k];
      for (std::size_t k = 0; k < t.b[l].size(); ++k) t.b[l][k] += decay.b[l][k];
    }
    return t;
  }
};

inline double mlp_objective(const MLPModel& model, const Matrix& batch, std::span<const double> targets,
                            double weight_decay) {
  const auto pred = mlp_forward(model, batch, Mode::eval).predictions;
  double s = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += (pred[i] - targets[i]) * (pred[i] - targets[i]);
  double sq = 0;
  model.params.for_each([&](double x) { sq += x * x; });
  return s / static_cast<double>(pred.size()) + 0.5 * weight_decay * sq;
}

/// Reverse-mode gradients on one batch. With a null rng dropout is off.
inline MLPGradients mlp_gradients(const MLPModel& model, const Matrix& batch, std::span<const double> targets,
                                  double weight_decay, Rng* rng = nullptr) {
  if (targets.size() != batch.rows()) throw DataError("mlp: batch rows do not match targets");
  const auto fp = mlp_forward_pass(model, batch, Mode::train, rng);
  const auto L = model.config.n_layers();
  const auto n = batch.rows();
  MLPGradients g;
  g.data = ParamSet::zeros_like(model.config.layer_widths);
  g.decay = model.params;
  g.decay.for_each([&](double& x) { x *= weight_decay; });

  Matrix delta(n, 1);
  for (std::size_t i = 0; i < n; ++i) {
    const double p = fp.predictions[i];
    const double r = p - targets[i];
    g.mse += r * r;
    delta(i, 0) = 2.0 * r / static_cast<double>(n) * p * (1.0 - p);
  }
  g.mse /= static_cast<double>(n);

  for (std::size_t l = L; l-- > 0;) {
    const Matrix& A = fp.act[l];
    auto& dW = g.data.W[l];
    auto& db = g.data.b[l];
    for (std::size_t i = 0; i < n; ++i) {
      auto d = delta.row(i);
      auto a = A.row(i);
      for (std::size_t j = 0; j < d.size(); ++j) db[j] += d[j];
      for (std::size_t k = 0; k < a.size(); ++k) {
        if (a[k] == 0.0) continue;
        auto w = dW.row(k);
        for (std::size_t j = 0; j < d.size(); ++j) w[j] += a[k] * d[j];
      }
    }
    if (l == 0) break;
    const Matrix& W = model.params.W[l];
    Matrix prev(n, W.rows());
    for (std::size_t i = 0; i < n; ++i) {
      auto d = delta.row(i);
      auto p = prev.row(i);
      for (std::size_t k = 0; k < W.rows(); ++k) {
        auto w = W.row(k);
        double s = 0;
        for (std::size_t j = 0; j < d.size(); ++j) s += d[j] * w[j];
        p[k] = s;
      }
    }
    // Back through dropout and ReLU of hidden layer l - 1.
    const auto& mask = fp.masks[l - 1];
    const auto& z = fp.pre[l - 1];
    for (std::size_t t = 0; t < prev.data().size(); ++t) {
      double v = z.data()[t] > 0 ? prev.data()[t] : 0.0;
      if (!mask.empty()) v *= mask.data()[t];
      prev.data()[t] = v;
    }
    delta = std::move(prev);
  }
  return g;
}

namespace detail {

inline void adam_update(double& theta, double grad, double& m, double& v, double lr, const MLPConfig& c,
                        double bias1, double bias2) {
  m = c.adam_beta1 * m + (1.0 - c.adam_beta1) * grad;
  v = c.adam_beta2 * v + (1.0 - c.adam_beta2) * grad * grad;
  theta -= lr * (m / bias1) / (std::sqrt(v / bias2) + c.adam_eps);
}

}  // namespace detail

/// One Adam step with coupled weight decay.
inline void adam_step(MLPModel& model, const ParamSet& grad, double lr) {
  const auto& c = model.config;
  ++model.step;
  const double t = static_cast<double>(model.step);
  const double bias1 = 1.0 - std::pow(c.adam_beta1, t);
  const double bias2 = 1.0 - std::pow(c.adam_beta2, t);
  for (std::size_t l = 0; l < model.params.W.size(); ++l) {
    auto& W = model.params.W[l].data();
    for (std::size_t k = 0; k < W.size(); ++k)
      detail::adam_update(W[k], grad.W[l].data()[k], model.adam_m.W[l].data()[k], model.adam_v.W[l].data()[k], lr, c,
                          bias1, bias2);
    auto& b = model.params.b[l];
    for (std::size_t k = 0; k < b.size(); ++k)
      detail::adam_update(b[k], grad.b[l][k], model.adam_m.b[l][k], model.adam_v.b[l][k], lr, c, bias1, bias2);
  }
}

inline double mlp_mse(const MLPModel& model, const Matrix& X, std::span<const double> y) {
  const auto pred = mlp_forward(model, X, Mode::eval).predictions;
  double s = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += (pred[i] - y[i]) * (pred[i] - y[i]);
  return s / static_cast<double>(pred.size());
}

/// Trains for config.epochs epochs of ceil(n / batch_size) steps each; the
/// last partial batch is kept and batches are reshuffled every epoch.
inline std::pair<MLPModel, TrainTrace> mlp_train(MLPModel model, const Dataset& train, const Dataset& val,
                                                 const MLPConfig& config) {
  config.validate();
  if (config.layer_widths != model.config.layer_widths) throw ConfigError("mlp: config widths differ from model");
  model.config = config;
  const auto n = train.size();
  if (n == 0) throw DataError("mlp_train: empty training set");
  if (val.size() == 0) throw DataError("mlp_train: empty validation set");
  if (train.n_features() != config.input_width() || val.n_features() != config.input_width())
    throw DataError("mlp_train: feature width does not match the input layer");
  for (double y : train.targets)
    if (!(y >= 0 && y <= 1)) throw DataError("mlp_train: training targets must lie in [0, 1]");

  TrainTrace trace;
  Rng rng(config.seed ^ 0x9E3779B97F4A7C15ULL);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = config.rate_for_epoch(epoch);
    shuffle(order, rng);
    double sq = 0;
    std::size_t batch_no = 0;
    for (std::size_t start = 0; start < n; start += config.batch_size, ++batch_no) {
      const auto stop = std::min(n, start + config.batch_size);
      std::span<const std::size_t> idx(order.data() + start, stop - start);
      const Matrix Xb = train.features.select_rows(idx);
      const auto yb = select(train.targets, idx);
      const auto g = mlp_gradients(model, Xb, yb, config.weight_decay, &rng);
      if (!std::isfinite(g.mse))
        throw NumericError("mlp_train: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(batch_no));
      sq += g.mse * static_cast<double>(idx.size());
      adam_step(model, g.total(), lr);
    }
    if (!model.all_finite())
      throw NumericError("mlp_train: non-finite parameters after epoch " + std::to_string(epoch));
    trace.train_loss.push_back(sq / static_cast<double>(n));
    trace.val_loss.push_back(mlp_mse(model, val.features, val.targets));
    if (!std::isfinite(trace.val_loss.back()))
      throw NumericError("mlp_train: non-finite validation loss at epoch " + std::to_string(epoch));
  }
  return {std::move(model), std::move(trace)};
}

/// Eval-mode penultimate activations.
inline Matrix mlp_extract(const MLPModel& model, const Matrix& X) { return mlp_forward(model, X, Mode::eval).features; }

inline Matrix mlp_extract(const MLPModel& model, const Dataset& d) { return mlp_extract(model, d.features); }

// ---------------------------------------------------------------------------
// Checkpoints (JSON; doubles are written in shortest round-trip form)

namespace detail {

inline nlohmann::json params_to_json(const ParamSet& p) {
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t l = 0; l < p.W.size(); ++l)
    layers.push_back({{"weight_shape", {p.W[l].rows(), p.W[l].cols()}},
                      {"weight", p.W[l].data()},
                      {"bias", p.b[l]}});
  return layers;
}

inline ParamSet params_from_json(const nlohmann::json& j, const std::vector<std::size_t>& widths) {
  ParamSet p = ParamSet::zeros_like(widths);
  if (!j.is_array() || j.size() != p.W.size()) throw DataError("mlp checkpoint: layer count mismatch");
  for (std::size_t l = 0; l < p.W.size(); ++l) {
    const auto shape = j[l].at("weight_shape").get<std::vector<std::size_t>>();
    if (shape.size() != 2 || shape[0] != p.W[l].rows() || shape[1] != p.W[l].cols())
      throw DataError("mlp checkpoint: weight shape mismatch in layer " + std::to_string(l));
    auto w = j[l].at("weight").get<std::vector<double>>();
    auto b = j[l].at("bias").get<std::vector<double>>();
    if (w.size() != p.W[l].data().size() || b.size() != p.b[l].size())
      throw DataError("mlp checkpoint: tensor size mismatch in layer " + std::to_string(l));
    p.W[l].data() = std::move(w);
    p.b[l] = std::move(b);
  }
  return p;
}

}  // namespace detail

inline nlohmann::json config_to_json(const MLPConfig& c) {
  return {{"layer_widths", c.layer_widths}, {"dropout_prob", c.dropout_prob}, {"learning_rate", c.learning_rate},
          {"weight_decay", c.weight_decay}, {"lr_gamma", c.lr_gamma},         {"lr_step_epochs", c.lr_step_epochs},
          {"epochs", c.epochs},             {"batch_size", c.batch_size},     {"seed", c.seed},
          {"adam_beta1", c.adam_beta1},     {"adam_beta2", c.adam_beta2},     {"adam_eps", c.adam_eps}};
}

inline MLPConfig config_from_json(const nlohmann::json& j) {
  MLPConfig c;
  auto get = [&](const char* key, auto& field) {
    if (!j.contains(key)) return;
    try {
      field = j.at(key).get<std::decay_t<decltype(field)>>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(std::string("mlp.") + key + ": wrong type");
    }
  };
  if (!j.is_object()) throw ConfigError("mlp: expected an object");
  get("layer_widths", c.layer_widths);
  get("dropout_prob", c.dropout_prob);
  get("learning_rate", c.learning_rate);
  get("weight_decay", c.weight_decay);
  get("lr_gamma", c.lr_gamma);
  get("lr_step_epochs", c.lr_step_epochs);
  get("epochs", c.epochs);
  get("batch_size", c.batch_size);
  get("seed", c.seed);
  get("adam_beta1", c.adam_beta1);
  get("adam_beta2", c.adam_beta2);
  get("adam_eps", c.adam_eps);
  c.validate();
  return c;
}

inline nlohmann::json checkpoint_to_json(const MLPModel& m) {
  return {{"format", "uqr-mlp"},
          {"version", 1},
          {"config", config_to_json(m.config)},
          {"seed", m.config.seed},
          {"step", m.step},
          {"layout", "row-major, weight (in x out)"},
          {"params", detail::params_to_json(m.params)},
          {"adam_m", detail::params_to_json(m.adam_m)},
          {"adam_v", detail::params_to_json(m.adam_v)}};
}

inline MLPModel checkpoint_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "uqr-mlp") throw DataError("mlp checkpoint: unrecognised format");
  MLPModel m;
  m.config = config_from_json(j.at("config"));
  m.step = j.at("step").get<std::uint64_t>();
  m.params = detail::params_from_json(j.at("params"), m.config.layer_widths);
  m.adam_m = detail::params_from_json(j.at("adam_m"), m.config.layer_widths);
  m.adam_v = detail::params_from_json(j.at("adam_v"), m.config.layer_widths);
  return m;
}

inline void save_checkpoint(const std::string& path, const MLPModel& m) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write checkpoint '" + path + "'");
  out << checkpoint_to_json(m).dump() << '\n';
}

inline MLPModel load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open checkpoint '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint '" + path + "': " + e.what());
  }
  return checkpoint_from_json(j);
}

}  // namespace uqr
