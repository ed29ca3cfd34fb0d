#pragma once

#include <algorithm>
#include <cmath>
#include <string>

#include "dynfuse/core/error.hpp"

namespace dynfuse {

inline void check_label(int label) {
  if (label != 0 && label != 1) {
    throw ValueError("label must be 0 or 1, got " + std::to_string(label));
  }
}

// -[l log p + (1 - l) log(1 - p)] with p clamped to [1e-7, 1 - 1e-7].
inline double bce_loss(int label, double p) {
  check_label(label);
  if (!std::isfinite(p) || p < 0.0 || p > 1.0) {
    throw ValueError("bce_loss: probability outside [0, 1]: " + std::to_string(p));
  }
  const double q = std::clamp(p, 1e-7, 1.0 - 1e-7);
  return label == 1 ? -std::log(q) : -std::log(1.0 - q);
}

}  // namespace dynfuse
