#pragma once

// Independent reference computations used only by tests. Nothing here calls
// into the library's numerical kernels; only the Tensor container is shared.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <vector>

#include "dynfuse/core/rng.hpp"
#include "dynfuse/core/tensor.hpp"

namespace oracle {

using dynfuse::Tensor;

inline Tensor<double> random_tensor(const dynfuse::Shape& shape,
                                    dynfuse::Rng& rng, double lo = -1.0,
                                    double hi = 1.0) {
  Tensor<double> t(shape);
  for (auto& x : t.data()) x = rng.uniform(lo, hi);
  return t;
}

// Direct loop over every output and every tap, padding by bounds checks.
inline Tensor<double> conv2d(const Tensor<double>& x, const Tensor<double>& k,
                             const Tensor<double>& b, std::size_t stride,
                             std::size_t pad) {
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t F = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  const std::size_t Ho = (H + 2 * pad - kh) / stride + 1;
  const std::size_t Wo = (W + 2 * pad - kw) / stride + 1;
  Tensor<double> out({B, F, Ho, Wo});
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t f = 0; f < F; ++f)
      for (std::size_t oy = 0; oy < Ho; ++oy)
        for (std::size_t ox = 0; ox < Wo; ++ox) {
          double acc = b[f];
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < kh; ++i)
              for (std::size_t j = 0; j < kw; ++j) {
                const long iy = static_cast<long>(oy * stride + i) - static_cast<long>(pad);
                const long ix = static_cast<long>(ox * stride + j) - static_cast<long>(pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(H) ||
                    ix >= static_cast<long>(W))
                  continue;
                acc += k.at({f, c, i, j}) *
                       x.at({n, c, static_cast<std::size_t>(iy),
                             static_cast<std::size_t>(ix)});
              }
          out.at({n, f, oy, ox}) = acc;
        }
  return out;
}

inline Tensor<double> conv3d(const Tensor<double>& x, const Tensor<double>& k,
                             const Tensor<double>& b, std::size_t stride,
                             std::size_t pad) {
  const std::size_t B = x.dim(0), C = x.dim(1), D = x.dim(2), H = x.dim(3),
                    W = x.dim(4);
  const std::size_t F = k.dim(0), kd = k.dim(2), kh = k.dim(3), kw = k.dim(4);
  const std::size_t Do = (D + 2 * pad - kd) / stride + 1;
  const std::size_t Ho = (H + 2 * pad - kh) / stride + 1;
  const std::size_t Wo = (W + 2 * pad - kw) / stride + 1;
  Tensor<double> out({B, F, Do, Ho, Wo});
  auto inside = [](long v, std::size_t n) { return v >= 0 && v < static_cast<long>(n); };
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t f = 0; f < F; ++f)
      for (std::size_t oz = 0; oz < Do; ++oz)
        for (std::size_t oy = 0; oy < Ho; ++oy)
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            double acc = b[f];
            for (std::size_t c = 0; c < C; ++c)
              for (std::size_t a = 0; a < kd; ++a)
                for (std::size_t i = 0; i < kh; ++i)
                  for (std::size_t j = 0; j < kw; ++j) {
                    const long iz = static_cast<long>(oz * stride + a) - static_cast<long>(pad);
                    const long iy = static_cast<long>(oy * stride + i) - static_cast<long>(pad);
                    const long ix = static_cast<long>(ox * stride + j) - static_cast<long>(pad);
                    if (!inside(iz, D) || !inside(iy, H) || !inside(ix, W)) continue;
                    acc += k.at({f, c, a, i, j}) *
                           x.at({n, c, static_cast<std::size_t>(iz),
                                 static_cast<std::size_t>(iy),
                                 static_cast<std::size_t>(ix)});
                  }
            out.at({n, f, oz, oy, ox}) = acc;
          }
  return out;
}

// Explicit dot products, one output at a time.
inline Tensor<double> dense(const Tensor<double>& x, const Tensor<double>& w,
                            const Tensor<double>& b) {
  Tensor<double> out({x.dim(0), w.dim(0)});
  for (std::size_t n = 0; n < x.dim(0); ++n)
    for (std::size_t j = 0; j < w.dim(0); ++j) {
      double acc = b.empty() ? 0.0 : b[j];
      for (std::size_t i = 0; i < x.dim(1); ++i) acc += x.at({n, i}) * w.at({j, i});
      out.at({n, j}) = acc;
    }
  return out;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Prefix sums divided by t.
inline std::vector<std::vector<double>> prefix_means(
    const std::vector<std::vector<double>>& phi) {
  std::vector<std::vector<double>> v;
  std::vector<double> sum(phi.at(0).size(), 0.0);
  for (std::size_t t = 0; t < phi.size(); ++t) {
    for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += phi[t][i];
    std::vector<double> m(sum.size());
    for (std::size_t i = 0; i < sum.size(); ++i) m[i] = sum[i] / static_cast<double>(t + 1);
    v.push_back(m);
  }
  return v;
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// 1/2|u|^2 + lambda * sum over every ordered pair q > t of the hinge on
// u.(v_q - v_t), written pair by pair.
inline double ranksvm_objective(const std::vector<double>& u,
                                const std::vector<std::vector<double>>& V,
                                double lambda) {
  double obj = 0.5 * dot(u, u);
  for (std::size_t t = 0; t < V.size(); ++t)
    for (std::size_t q = t + 1; q < V.size(); ++q) {
      std::vector<double> d(u.size());
      for (std::size_t i = 0; i < u.size(); ++i) d[i] = V[q][i] - V[t][i];
      obj += lambda * std::max(0.0, 1.0 - dot(u, d));
    }
  return obj;
}

// Exact minimiser of the ranking objective through its dual,
//   max_a sum a_p - 1/2 |sum_p a_p d_p|^2,  0 <= a_p <= lambda,
// solved by cyclic coordinate ascent until no coordinate moves; u = sum a_p d_p.
inline std::vector<double> ranksvm_dual_solve(
    const std::vector<std::vector<double>>& V, double lambda,
    int sweeps = 200000) {
  const std::size_t n = V.at(0).size();
  std::vector<std::vector<double>> d;
  for (std::size_t t = 0; t < V.size(); ++t)
    for (std::size_t q = t + 1; q < V.size(); ++q) {
      std::vector<double> diff(n);
      for (std::size_t i = 0; i < n; ++i) diff[i] = V[q][i] - V[t][i];
      d.push_back(diff);
    }
  std::vector<double> a(d.size(), 0.0), u(n, 0.0);
  for (int s = 0; s < sweeps; ++s) {
    double moved = 0.0;
    for (std::size_t p = 0; p < d.size(); ++p) {
      const double qq = dot(d[p], d[p]);
      if (qq <= 0.0) continue;
      const double g = 1.0 - dot(u, d[p]);
      const double na = std::clamp(a[p] + g / qq, 0.0, lambda);
      const double delta = na - a[p];
      if (delta != 0.0) {
        for (std::size_t i = 0; i < n; ++i) u[i] += delta * d[p][i];
        a[p] = na;
        moved = std::max(moved, std::abs(delta));
      }
    }
    if (moved < 1e-15) break;
  }
  return u;
}

// Mann-Whitney count over every positive/negative pair, ties worth 1/2.
inline double auc_pairs(const std::vector<int>& y, const std::vector<double>& s) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i)
    for (std::size_t j = 0; j < y.size(); ++j) {
      if (y[i] != 1 || y[j] != 0) continue;
      den += 1.0;
      if (s[i] > s[j]) num += 1.0;
      else if (s[i] == s[j]) num += 0.5;
    }
  return num / den;
}

// Rank of item i: items with a higher score, or an equal score and a smaller
// index, come first. AP is the mean over positives of precision at their rank.
inline double ap_rank_walk(const std::vector<int>& y, const std::vector<double>& s) {
  double total = 0.0;
  int positives = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (y[i] != 1) continue;
    ++positives;
    int rank = 1, hits = 1;
    for (std::size_t j = 0; j < y.size(); ++j) {
      if (j == i) continue;
      const bool before = s[j] > s[i] || (s[j] == s[i] && j < i);
      if (before) {
        ++rank;
        if (y[j] == 1) ++hits;
      }
    }
    total += static_cast<double>(hits) / rank;
  }
  return total / positives;
}

}  // namespace oracle
