#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

#include "dynfuse/core/error.hpp"
#include "dynfuse/core/tensor.hpp"
#include "dynfuse/loss.hpp"

// Linear soft-margin SVM on fixed features:
//   min_{w,b} 1/2 |w|^2 + reg * sum_i max(0, 1 - y_i (w.x_i + b)),  y in {-1,+1}
namespace dynfuse {

struct SvmConfig {
  double reg = 1.0;
  std::size_t iters = 20000;

  void validate() const {
    if (!(reg > 0.0)) throw ConfigError("svm reg must be > 0");
    if (iters < 1) throw ConfigError("svm iters must be >= 1");
  }
};

struct LinearSvm {
  std::vector<double> w;
  double b = 0.0;

  double decision(const double* x) const {
    double s = b;
    for (std::size_t i = 0; i < w.size(); ++i) s += w[i] * x[i];
    return s;
  }
  int predict(const double* x) const { return decision(x) >= 0.0 ? 1 : 0; }
};

namespace detail {

inline std::vector<double> signed_labels(const std::vector<int>& labels) {
  std::vector<double> y;
  int pos = 0;
  for (int l : labels) {
    check_label(l);
    pos += l;
    y.push_back(l == 1 ? 1.0 : -1.0);
  }
  if (pos == 0 || pos == static_cast<int>(labels.size())) {
    throw ValueError("svm: training labels contain a single class");
  }
  return y;
}

}  // namespace detail

inline double svm_objective(const LinearSvm& m, const Tensor<double>& X,
                            const std::vector<int>& labels, double reg) {
  require_rank(X, 2, "svm features");
  const std::size_t n = X.dim(1);
  double obj = 0.0;
  for (double v : m.w) obj += 0.5 * v * v;
  for (std::size_t i = 0; i < X.dim(0); ++i) {
    const double y = labels[i] == 1 ? 1.0 : -1.0;
    obj += reg * std::max(0.0, 1.0 - y * m.decision(X.ptr() + i * n));
  }
  return obj;
}

// Exact minimiser over b for fixed w: the objective is convex and piecewise
// linear in b with breakpoints at b = y_i - w.x_i.
inline double svm_best_bias(const std::vector<double>& w, const Tensor<double>& X,
                            const std::vector<double>& y, double reg, double current) {
  const std::size_t N = X.dim(0), n = X.dim(1);
  std::vector<double> s(N);
  for (std::size_t i = 0; i < N; ++i) {
    double d = 0.0;
    for (std::size_t j = 0; j < n; ++j) d += w[j] * X[i * n + j];
    s[i] = d;
  }
  auto cost = [&](double b) {
    double c = 0.0;
    for (std::size_t i = 0; i < N; ++i) c += std::max(0.0, 1.0 - y[i] * (s[i] + b));
    return reg * c;
  };
  double best = current, best_cost = cost(current);
  for (std::size_t i = 0; i < N; ++i) {
    const double b = y[i] - s[i];
    const double c = cost(b);
    if (c < best_cost) {
      best_cost = c;
      best = b;
    }
  }
  return best;
}

// Deterministic full-batch subgradient descent with steps 1/sqrt(k) scaled
// to the data, keeping the best iterate; the bias is then set to its exact
// minimiser for the chosen w.
inline LinearSvm svm_fit(const Tensor<double>& X, const std::vector<int>& labels,
                         const SvmConfig& cfg = {}) {
  cfg.validate();
  require_rank(X, 2, "svm features");
  if (labels.size() != X.dim(0)) throw ShapeError("svm: label count does not match features");
  const auto y = detail::signed_labels(labels);
  const std::size_t N = X.dim(0), n = X.dim(1);

  double scale = 1.0;
  for (double v : X.data()) scale = std::max(scale, std::abs(v));
  const double eta0 = 1.0 / (scale * scale * std::max(1.0, cfg.reg * static_cast<double>(N)));

  LinearSvm cur{std::vector<double>(n, 0.0), 0.0};
  LinearSvm best = cur;
  double best_obj = svm_objective(cur, X, labels, cfg.reg);
  std::vector<double> gw(n);
  for (std::size_t k = 1; k <= cfg.iters; ++k) {
    gw = cur.w;
    double gb = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
      const double* x = X.ptr() + i * n;
      if (y[i] * cur.decision(x) < 1.0) {
        for (std::size_t j = 0; j < n; ++j) gw[j] -= cfg.reg * y[i] * x[j];
        gb -= cfg.reg * y[i];
      }
    }
    const double eta = eta0 * static_cast<double>(N) / std::sqrt(static_cast<double>(k));
    for (std::size_t j = 0; j < n; ++j) cur.w[j] -= eta * gw[j];
    cur.b -= eta * gb;
    const double obj = svm_objective(cur, X, labels, cfg.reg);
    if (!std::isfinite(obj)) throw NumericError("svm: non-finite iterate");
    if (obj < best_obj) {
      best_obj = obj;
      best = cur;
    }
  }
  best.b = svm_best_bias(best.w, X, y, cfg.reg, best.b);
  return best;
}

}  // namespace dynfuse
