#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "dynfuse/core/error.hpp"
#include "dynfuse/core/graph.hpp"
#include "dynfuse/core/tensor.hpp"
#include "dynfuse/core/tensor_ops.hpp"

// Rank-pooling fusion of a depth-ordered slice stack into one image.
//
// The sequence phi_1..phi_T is first smoothed into running means
// v_t = (1/t) * sum_{tau<=t} phi_tau. Rank pooling then looks for the linear
// scoring vector u whose scores u.v_t increase with depth, as the minimiser of
//
//   J(u) = 1/2 |u|^2 + lambda * sum_{q>t} max(0, 1 - u.(v_q - v_t)).
//
// ranksvm_solve minimises J directly. approx_rank_pool is the closed form
// used on the training path: u = sum_t (2t - T - 1) v_t, the negative
// subgradient of the hinge sum at u = 0.
namespace dynfuse {

// Depth-ordered stack of equally shaped items (T >= 1).
template <typename S>
class SliceSequence {
 public:
  SliceSequence() = default;

  explicit SliceSequence(std::vector<Tensor<S>> items) : items_(std::move(items)) {
    if (items_.empty()) throw ValueError("slice sequence is empty");
    for (const auto& it : items_) {
      if (it.shape() != items_.front().shape()) {
        throw ShapeError("slice sequence items differ in shape: " +
                         to_string(items_.front().shape()) + " vs " +
                         to_string(it.shape()));
      }
    }
  }

  // Splits a stacked tensor [T, ...] along its leading axis.
  static SliceSequence from_stacked(const Tensor<S>& stacked) {
    if (stacked.rank() < 2) {
      throw ShapeError("stacked sequence needs rank >= 2, got " +
                       to_string(stacked.shape()));
    }
    std::vector<Tensor<S>> items;
    const Shape item(stacked.shape().begin() + 1, stacked.shape().end());
    const std::size_t n = numel(item);
    for (std::size_t t = 0; t < stacked.dim(0); ++t) {
      items.emplace_back(item, std::vector<S>(stacked.ptr() + t * n,
                                              stacked.ptr() + (t + 1) * n));
    }
    return SliceSequence(std::move(items));
  }

  Tensor<S> stacked() const {
    Shape shape{items_.size()};
    shape.insert(shape.end(), item_shape().begin(), item_shape().end());
    std::vector<S> data;
    data.reserve(numel(shape));
    for (const auto& it : items_) data.insert(data.end(), it.vec().begin(), it.vec().end());
    return Tensor<S>(std::move(shape), std::move(data));
  }

  std::size_t depth() const noexcept { return items_.size(); }
  const Shape& item_shape() const { return items_.at(0).shape(); }
  const Tensor<S>& operator[](std::size_t t) const { return items_[t]; }
  const std::vector<Tensor<S>>& items() const noexcept { return items_; }

 private:
  std::vector<Tensor<S>> items_;
};

template <typename S>
struct DynamicImage {
  Tensor<S> value;
};

struct RankSolverConfig {
  double lambda = 1.0;
  std::size_t max_iters = 2000;
  // Early exit once the averaged iterate's objective moves less than this
  // over a 100-iteration window.
  double tolerance = 1e-10;

  void validate() const {
    if (!(lambda > 0.0)) throw ConfigError("rank solver lambda must be > 0");
    if (max_iters < 1) throw ConfigError("rank solver max_iters must be >= 1");
    if (!(tolerance > 0.0)) throw ConfigError("rank solver tolerance must be > 0");
  }
};

namespace detail {

// Running means over a stacked [T, n] buffer. The incremental update keeps
// a constant sequence exactly constant.
template <typename S>
std::vector<S> running_means(const S* phi, std::size_t T, std::size_t n) {
  std::vector<S> v(phi, phi + T * n);
  for (std::size_t t = 1; t < T; ++t) {
    const S inv = S{1} / static_cast<S>(t + 1);
    const S* prev = v.data() + (t - 1) * n;
    S* cur = v.data() + t * n;
    for (std::size_t i = 0; i < n; ++i) cur[i] = prev[i] + (cur[i] - prev[i]) * inv;
  }
  return v;
}

// sum_t (2t - T - 1) v_t written as sum over mirrored pairs, so that equal
// items cancel exactly.
template <typename S>
void weighted_pairs(const S* v, std::size_t T, std::size_t n, S* out) {
  std::fill(out, out + n, S{0});
  for (std::size_t t = T; t > (T + 1) / 2; --t) {  // 1-based t in upper half
    const S beta = static_cast<S>(2 * t) - static_cast<S>(T + 1);
    const S* hi = v + (t - 1) * n;
    const S* lo = v + (T - t) * n;
    for (std::size_t i = 0; i < n; ++i) out[i] += beta * (hi[i] - lo[i]);
  }
}

template <typename S>
void approx_rank_pool_raw(const S* phi, std::size_t T, std::size_t n, S* out) {
  const auto v = running_means(phi, T, n);
  weighted_pairs(v.data(), T, n, out);
}

}  // namespace detail

// beta_t = 2t - T - 1 for t = 1..T.
inline std::vector<double> arp_coefficients(std::size_t T) {
  std::vector<double> beta(T);
  for (std::size_t t = 1; t <= T; ++t) {
    beta[t - 1] = 2.0 * static_cast<double>(t) - static_cast<double>(T) - 1.0;
  }
  return beta;
}

// Weight of raw slice tau in approx_rank_pool after composing with the
// running mean: alpha_tau = sum_{t>=tau} beta_t / t.
inline std::vector<double> arp_slice_weights(std::size_t T) {
  const auto beta = arp_coefficients(T);
  std::vector<double> alpha(T);
  double acc = 0.0;
  for (std::size_t t = T; t >= 1; --t) {
    acc += beta[t - 1] / static_cast<double>(t);
    alpha[t - 1] = acc;
  }
  return alpha;
}

template <typename S>
SliceSequence<S> smooth_sequence(const SliceSequence<S>& phi) {
  if (phi.depth() == 0) throw ValueError("smooth_sequence: empty sequence");
  const auto stacked = phi.stacked();
  const std::size_t n = numel(phi.item_shape());
  auto v = detail::running_means(stacked.ptr(), phi.depth(), n);
  return SliceSequence<S>::from_stacked(Tensor<S>(stacked.shape(), std::move(v)));
}

template <typename S>
S rank_score(const DynamicImage<S>& u, const Tensor<S>& v) {
  if (u.value.shape() != v.shape()) {
    throw ShapeError("rank_score: shape mismatch " + to_string(u.value.shape()) +
                     " vs " + to_string(v.shape()));
  }
  S acc = 0;
  for (std::size_t i = 0; i < v.size(); ++i) acc += u.value[i] * v[i];
  return acc;
}

// J(u) on an already smoothed sequence V.
template <typename S>
double ranksvm_objective(const DynamicImage<S>& u, const SliceSequence<S>& V,
                         const RankSolverConfig& cfg) {
  cfg.validate();
  if (u.value.shape() != V.item_shape()) {
    throw ShapeError("ranksvm_objective: shape mismatch " +
                     to_string(u.value.shape()) + " vs " +
                     to_string(V.item_shape()));
  }
  const std::size_t T = V.depth();
  std::vector<double> score(T);
  for (std::size_t t = 0; t < T; ++t) score[t] = rank_score(u, V[t]);
  double reg = 0.0;
  for (S x : u.value.data()) reg += static_cast<double>(x) * x;
  double hinge = 0.0;
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t q = t + 1; q < T; ++q) {
      hinge += std::max(0.0, 1.0 - (score[q] - score[t]));
    }
  }
  return 0.5 * reg + cfg.lambda * hinge;
}

template <typename S>
DynamicImage<S> approx_rank_pool(const SliceSequence<S>& phi) {
  if (phi.depth() == 0) throw ValueError("approx_rank_pool: empty sequence");
  const auto stacked = phi.stacked();
  Tensor<S> out(phi.item_shape());
  detail::approx_rank_pool_raw(stacked.ptr(), phi.depth(), out.size(), out.ptr());
  check_finite(out, "approx_rank_pool");
  return {std::move(out)};
}

// Gradient w.r.t. each raw slice: the transpose of the composed
// (running-mean, then beta-weighting) linear map applied to `upstream`.
template <typename S>
SliceSequence<S> arp_backward(const Tensor<S>& upstream, std::size_t T) {
  if (T == 0) throw ValueError("arp_backward: empty sequence");
  const auto alpha = arp_slice_weights(T);
  std::vector<Tensor<S>> grads;
  grads.reserve(T);
  for (std::size_t t = 0; t < T; ++t) {
    grads.push_back(scale(upstream, static_cast<S>(alpha[t])));
  }
  return SliceSequence<S>(std::move(grads));
}

// Projected subgradient descent on J over an already smoothed sequence.
//
// Steps are eta_k = 2/(k+1) on the gradient of J (J is 1-strongly convex),
// iterates are projected onto the ball |u| <= sqrt(2*lambda*P) that contains
// the minimiser (P = number of pairs, J(u*) <= J(0) = lambda*P), and a
// k-weighted running average is kept. The lowest-objective point seen among
// iterates, averages and the two reference points u = 0 and the
// approx_rank_pool direction is returned.
template <typename S>
DynamicImage<S> ranksvm_solve_smoothed(const SliceSequence<S>& V,
                                       const RankSolverConfig& cfg) {
  cfg.validate();
  const std::size_t T = V.depth();
  const Shape& shape = V.item_shape();
  const std::size_t n = numel(shape);
  if (T == 1) return {Tensor<S>(shape)};

  const auto stacked = V.stacked();
  const double lambda = cfg.lambda;
  const double pairs = static_cast<double>(T * (T - 1) / 2);
  const double radius = std::sqrt(2.0 * lambda * pairs);

  std::vector<double> vdat(stacked.vec().begin(), stacked.vec().end());
  std::vector<double> u(n, 0.0), avg(n, 0.0), grad(n), score(T), coef(T);

  auto objective = [&](const std::vector<double>& w) {
    double reg = 0.0;
    for (double x : w) reg += x * x;
    for (std::size_t t = 0; t < T; ++t) {
      double s = 0.0;
      const double* vt = vdat.data() + t * n;
      for (std::size_t i = 0; i < n; ++i) s += w[i] * vt[i];
      score[t] = s;
    }
    double hinge = 0.0;
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t q = t + 1; q < T; ++q) {
        hinge += std::max(0.0, 1.0 - (score[q] - score[t]));
      }
    }
    return 0.5 * reg + lambda * hinge;
  };

  std::vector<double> best(n, 0.0);
  double best_obj = objective(best);
  auto consider = [&](const std::vector<double>& w) {
    const double j = objective(w);
    if (!std::isfinite(j)) throw NumericError("ranksvm_solve: non-finite iterate");
    if (j < best_obj) {
      best_obj = j;
      best = w;
    }
    return j;
  };
  {
    std::vector<double> arp(n);
    detail::weighted_pairs(vdat.data(), T, n, arp.data());
    consider(arp);
  }

  double window_start = std::numeric_limits<double>::infinity();
  for (std::size_t k = 1; k <= cfg.max_iters; ++k) {
    // scores at the current iterate (objective() fills `score`)
    consider(u);
    std::fill(coef.begin(), coef.end(), 0.0);
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t q = t + 1; q < T; ++q) {
        if (1.0 - (score[q] - score[t]) > 0.0) {
          coef[q] += 1.0;
          coef[t] -= 1.0;
        }
      }
    }
    const double eta = 2.0 / (static_cast<double>(k) + 1.0);
    for (std::size_t i = 0; i < n; ++i) grad[i] = u[i];
    for (std::size_t t = 0; t < T; ++t) {
      if (coef[t] == 0.0) continue;
      const double c = lambda * coef[t];
      const double* vt = vdat.data() + t * n;
      for (std::size_t i = 0; i < n; ++i) grad[i] -= c * vt[i];
    }
    double norm = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      u[i] -= eta * grad[i];
      norm += u[i] * u[i];
    }
    norm = std::sqrt(norm);
    if (!std::isfinite(norm)) throw NumericError("ranksvm_solve: non-finite iterate");
    if (norm > radius) {
      for (double& x : u) x *= radius / norm;
    }
    for (std::size_t i = 0; i < n; ++i) avg[i] += eta * (u[i] - avg[i]);
    const double javg = consider(avg);
    if (k % 100 == 0) {
      if (std::abs(window_start - javg) < cfg.tolerance) break;
      window_start = javg;
    }
  }
  consider(u);

  Tensor<S> out(shape);
  for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<S>(best[i]);
  return {std::move(out)};
}

// Smooths phi, then solves the ranking problem on the running means.
template <typename S>
DynamicImage<S> ranksvm_solve(const SliceSequence<S>& phi,
                              const RankSolverConfig& cfg) {
  return ranksvm_solve_smoothed(smooth_sequence(phi), cfg);
}

// Consecutive chunks of k slices (the last may be shorter), each fused with
// approx_rank_pool.
template <typename S>
SliceSequence<S> chunked_fuse(const SliceSequence<S>& phi, std::size_t k) {
  if (k < 1) throw ConfigError("chunked_fuse: chunk size must be >= 1");
  if (phi.depth() == 0) throw ValueError("chunked_fuse: empty sequence");
  std::vector<Tensor<S>> out;
  for (std::size_t begin = 0; begin < phi.depth(); begin += k) {
    const std::size_t end = std::min(phi.depth(), begin + k);
    std::vector<Tensor<S>> chunk(phi.items().begin() + begin,
                                 phi.items().begin() + end);
    out.push_back(approx_rank_pool(SliceSequence<S>(std::move(chunk))).value);
  }
  return SliceSequence<S>(std::move(out));
}

// Depth index of the first maximum for every element.
template <typename S>
std::vector<std::size_t> maxpool_fuse_argmax(const SliceSequence<S>& phi) {
  const std::size_t n = numel(phi.item_shape());
  std::vector<std::size_t> arg(n, 0);
  for (std::size_t t = 1; t < phi.depth(); ++t) {
    for (std::size_t i = 0; i < n; ++i) {
      if (phi[t][i] > phi[arg[i]][i]) arg[i] = t;
    }
  }
  return arg;
}

template <typename S>
DynamicImage<S> maxpool_fuse(const SliceSequence<S>& phi) {
  if (phi.depth() == 0) throw ValueError("maxpool_fuse: empty sequence");
  const auto arg = maxpool_fuse_argmax(phi);
  Tensor<S> out(phi.item_shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = phi[arg[i]][i];
  return {std::move(out)};
}

template <typename S>
SliceSequence<S> maxpool_fuse_backward(const SliceSequence<S>& phi,
                                       const Tensor<S>& upstream) {
  require_shape(upstream, phi.item_shape(), "maxpool_fuse_backward");
  const auto arg = maxpool_fuse_argmax(phi);
  std::vector<Tensor<S>> grads(phi.depth(), Tensor<S>(phi.item_shape()));
  for (std::size_t i = 0; i < arg.size(); ++i) grads[arg[i]][i] = upstream[i];
  return SliceSequence<S>(std::move(grads));
}

// Per-item affine rescale of a stacked [N, ...] tensor to [0, 1]. Constant
// items map to zeros.
template <typename S>
Tensor<S> minmax_rescale(const Tensor<S>& stacked) {
  Tensor<S> out(stacked.shape());
  const std::size_t N = stacked.dim(0), n = stacked.size() / N;
  for (std::size_t b = 0; b < N; ++b) {
    const S* x = stacked.ptr() + b * n;
    const S lo = *std::min_element(x, x + n);
    const S range = *std::max_element(x, x + n) - lo;
    if (!(range > S{0})) continue;
    for (std::size_t i = 0; i < n; ++i) out[b * n + i] = (x[i] - lo) / range;
  }
  return out;
}

namespace ag {

// [T, ...] -> [1, ...]
template <typename S>
Var<S> approx_rank_pool(Graph<S>& g, Var<S> x) {
  const auto& in = g.value(x);
  Shape shape = in.shape();
  const std::size_t T = shape[0];
  shape[0] = 1;
  Tensor<S> out(shape);
  detail::approx_rank_pool_raw(in.ptr(), T, out.size(), out.ptr());
  return g.record(std::move(out), {x},
                  [x, T](Graph<S>& gr, const Tensor<S>& go) {
                    const auto alpha = arp_slice_weights(T);
                    Tensor<S> gx(gr.value(x).shape());
                    const std::size_t n = go.size();
                    for (std::size_t t = 0; t < T; ++t) {
                      const S a = static_cast<S>(alpha[t]);
                      for (std::size_t i = 0; i < n; ++i) gx[t * n + i] = a * go[i];
                    }
                    gr.accumulate(x, gx);
                  },
                  "approx_rank_pool");
}

// [T, ...] -> [1, ...], elementwise max over the leading axis.
template <typename S>
Var<S> maxpool_fuse(Graph<S>& g, Var<S> x) {
  const auto seq = SliceSequence<S>::from_stacked(g.value(x));
  const auto arg = maxpool_fuse_argmax(seq);
  g.note_indices(arg);
  Shape shape = g.value(x).shape();
  shape[0] = 1;
  Tensor<S> out = maxpool_fuse(seq).value.reshape(shape);
  return g.record(std::move(out), {x},
                  [x, arg](Graph<S>& gr, const Tensor<S>& go) {
                    Tensor<S> gx(gr.value(x).shape());
                    const std::size_t n = go.size();
                    for (std::size_t i = 0; i < n; ++i) gx[arg[i] * n + i] = go[i];
                    gr.accumulate(x, gx);
                  },
                  "maxpool_fuse");
}

// Chunks of k along the leading axis, each approx-rank-pooled:
// [T, ...] -> [ceil(T/k), ...].
template <typename S>
Var<S> chunked_fuse(Graph<S>& g, Var<S> x, std::size_t k) {
  if (k < 1) throw ConfigError("chunked_fuse: chunk size must be >= 1");
  const std::size_t T = g.value(x).dim(0);
  std::vector<Var<S>> parts;
  for (std::size_t begin = 0; begin < T; begin += k) {
    const std::size_t end = std::min(T, begin + k);
    parts.push_back(approx_rank_pool(g, slice(g, x, 0, begin, end)));
  }
  return parts.size() == 1 ? parts.front() : concat(g, parts, 0);
}

template <typename S>
Var<S> minmax_rescale(Graph<S>& g, Var<S> x) {
  const auto& in = g.value(x);
  const std::size_t N = in.dim(0), n = in.size() / N;
  std::vector<std::size_t> lo(N), hi(N);
  for (std::size_t b = 0; b < N; ++b) {
    const S* p = in.ptr() + b * n;
    // first minimum and first maximum in scan order
    lo[b] = static_cast<std::size_t>(std::min_element(p, p + n) - p);
    hi[b] = static_cast<std::size_t>(std::max_element(p, p + n) - p);
  }
  g.note_indices(lo);
  g.note_indices(hi);
  auto out = dynfuse::minmax_rescale(in);
  return g.record(std::move(out), {x},
                  [x, lo, hi, N, n](Graph<S>& gr, const Tensor<S>& go) {
                    const auto& xv = gr.value(x);
                    Tensor<S> gx(xv.shape());
                    for (std::size_t b = 0; b < N; ++b) {
                      const S* p = xv.ptr() + b * n;
                      const S range = p[hi[b]] - p[lo[b]];
                      if (!(range > S{0})) continue;
                      S dmin = 0, dmax = 0;
                      for (std::size_t i = 0; i < n; ++i) {
                        const S y = (p[i] - p[lo[b]]) / range;
                        const S gi = go[b * n + i];
                        gx[b * n + i] += gi / range;
                        dmin += gi * (y - S{1}) / range;
                        dmax -= gi * y / range;
                      }
                      gx[b * n + lo[b]] += dmin;
                      gx[b * n + hi[b]] += dmax;
                    }
                    gr.accumulate(x, gx);
                  },
                  "minmax_rescale");
}

}  // namespace ag
}  // namespace dynfuse
