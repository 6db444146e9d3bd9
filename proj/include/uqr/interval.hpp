#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "uqr/core.hpp"

namespace uqr {

enum class Method { naive, jackknife_plus_ab, cv, cv_plus, cv_minmax, cqr };

inline constexpr Method kAllMethods[] = {Method::naive,   Method::jackknife_plus_ab, Method::cv,
                                         Method::cv_plus, Method::cv_minmax,         Method::cqr};

inline std::string_view method_name(Method m) {
  switch (m) {
    case Method::naive: return "naive";
    case Method::jackknife_plus_ab: return "jackknife_plus_ab";
    case Method::cv: return "cv";
    case Method::cv_plus: return "cv_plus";
    case Method::cv_minmax: return "cv_minmax";
    case Method::cqr: return "cqr";
  }
  return "?";
}

inline Method parse_method(std::string_view s) {
  for (auto m : kAllMethods)
    if (method_name(m) == s) return m;
  throw ConfigError("unknown interval method '" + std::string(s) + "'");
}

/// Per-sample point prediction and [lower, upper] bounds at miscoverage
/// alpha. An unbounded side is stored as -inf / +inf.
struct IntervalBatch {
  std::vector<double> point, lower, upper;
  double alpha = 0.1;
  Method method = Method::naive;

  std::size_t size() const noexcept { return point.size(); }

  double width(std::size_t i) const { return upper[i] - lower[i]; }

  bool is_infinite(std::size_t i) const { return !std::isfinite(width(i)); }

  std::vector<double> widths() const {
    std::vector<double> w(size());
    for (std::size_t i = 0; i < size(); ++i) w[i] = width(i);
    return w;
  }

  /// Affine map of the target axis (scale > 0), e.g. undoing min-max scaling.
  IntervalBatch rescaled(double scale, double offset) const {
    IntervalBatch out = *this;
    for (std::size_t i = 0; i < size(); ++i) {
      out.point[i] = point[i] * scale + offset;
      out.lower[i] = lower[i] * scale + offset;
      out.upper[i] = upper[i] * scale + offset;
    }
    return out;
  }
};

}  // namespace uqr
