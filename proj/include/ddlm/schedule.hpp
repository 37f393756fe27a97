#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

#include "error.hpp"

namespace ddlm {

enum class ScheduleKind { linear, cosine };

inline std::string to_string(ScheduleKind k) { return k == ScheduleKind::linear ? "linear" : "cosine"; }

inline ScheduleKind schedule_kind_from(const std::string& s) {
  if (s == "linear") return ScheduleKind::linear;
  if (s == "cosine") return ScheduleKind::cosine;
  throw ConfigError("unknown schedule kind '" + s + "'");
}

// Marginal mask probability gamma(t): gamma(0) = 0, gamma(1) = 1, monotone.
struct NoiseSchedule {
  ScheduleKind kind = ScheduleKind::linear;

  // Clamp used by weight() so gamma'(t)/gamma(t) stays bounded near t = 0.
  static constexpr double kEps = 1e-4;

  double eval(double t) const {
    t = std::clamp(t, 0.0, 1.0);
    if (kind == ScheduleKind::linear) return t;
    return 1.0 - std::cos(0.5 * std::numbers::pi * t);
  }

  double deriv(double t) const {
    t = std::clamp(t, 0.0, 1.0);
    if (kind == ScheduleKind::linear) return 1.0;
    return 0.5 * std::numbers::pi * std::sin(0.5 * std::numbers::pi * t);
  }

  double weight(double t) const {
    t = std::clamp(t, kEps, 1.0 - kEps);
    return deriv(t) / eval(t);
  }

  // t such that eval(t) == g.
  double inverse(double g) const {
    g = std::clamp(g, 0.0, 1.0);
    if (kind == ScheduleKind::linear) return g;
    return std::acos(1.0 - g) * 2.0 / std::numbers::pi;
  }
};

// Edit budget rate alpha(t) = alpha_max * t, alpha_max in (0, 0.1].
struct EditSchedule {
  double alpha_max = 0.1;

  EditSchedule() = default;
  explicit EditSchedule(double amax) : alpha_max(amax) {
    if (!(amax > 0.0 && amax <= 0.1)) throw ConfigError("alpha_max must lie in (0, 0.1]");
  }

  double eval(double t) const { return alpha_max * std::clamp(t, 0.0, 1.0); }
};

}  // namespace ddlm
