#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "dynfuse/core/tensor.hpp"

namespace dynfuse {

enum class PoolMode { SpatialAvg, SpatialMax, ChannelAvg, ChannelMax, WindowMax };

struct PoolSpec {
  PoolMode mode = PoolMode::SpatialAvg;
  std::size_t window = 2;  // WindowMax only
  std::size_t stride = 2;  // WindowMax only
};

inline std::string to_string(PoolMode m) {
  switch (m) {
    case PoolMode::SpatialAvg: return "spatial-avg";
    case PoolMode::SpatialMax: return "spatial-max";
    case PoolMode::ChannelAvg: return "channel-avg";
    case PoolMode::ChannelMax: return "channel-max";
    case PoolMode::WindowMax: return "window-max";
  }
  return "?";
}

namespace detail {

struct PoolGeom {
  std::size_t B, C, H, W, Ho, Wo;
};

template <typename S>
PoolGeom pool_geometry(const Tensor<S>& x, const PoolSpec& spec) {
  require_rank(x, 4, "pooling input");
  PoolGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), 1, 1};
  if (spec.mode == PoolMode::WindowMax) {
    if (spec.window == 0 || spec.stride == 0) {
      throw ShapeError("window-max: window and stride must be positive");
    }
    for (std::size_t n : {g.H, g.W}) {
      if (n < spec.window || (n - spec.window) % spec.stride != 0) {
        throw ShapeError("window-max: extent " + std::to_string(n) +
                         " not divisible for window " +
                         std::to_string(spec.window) + ", stride " +
                         std::to_string(spec.stride) + " in " +
                         to_string(x.shape()));
      }
    }
    g.Ho = (g.H - spec.window) / spec.stride + 1;
    g.Wo = (g.W - spec.window) / spec.stride + 1;
  }
  return g;
}

}  // namespace detail

inline Shape pooled_shape(const Shape& in, const PoolSpec& spec) {
  switch (spec.mode) {
    case PoolMode::SpatialAvg:
    case PoolMode::SpatialMax: return {in[0], in[1], 1, 1};
    case PoolMode::ChannelAvg:
    case PoolMode::ChannelMax: return {in[0], 1, in[2], in[3]};
    case PoolMode::WindowMax:
      return {in[0], in[1], (in[2] - spec.window) / spec.stride + 1,
              (in[3] - spec.window) / spec.stride + 1};
  }
  return in;
}

// Flat input index selected by each output element of a max mode (the first
// maximum in scan order). Empty for average modes.
template <typename S>
std::vector<std::size_t> pool_argmax(const Tensor<S>& x, const PoolSpec& spec) {
  const auto g = detail::pool_geometry(x, spec);
  std::vector<std::size_t> arg;
  const std::size_t plane = g.H * g.W;
  switch (spec.mode) {
    case PoolMode::SpatialMax:
      arg.resize(g.B * g.C);
      for (std::size_t bc = 0; bc < g.B * g.C; ++bc) {
        std::size_t best = bc * plane;
        for (std::size_t i = 1; i < plane; ++i) {
          if (x[bc * plane + i] > x[best]) best = bc * plane + i;
        }
        arg[bc] = best;
      }
      break;
    case PoolMode::ChannelMax:
      arg.resize(g.B * plane);
      for (std::size_t b = 0; b < g.B; ++b) {
        for (std::size_t p = 0; p < plane; ++p) {
          std::size_t best = b * g.C * plane + p;
          for (std::size_t c = 1; c < g.C; ++c) {
            const std::size_t i = (b * g.C + c) * plane + p;
            if (x[i] > x[best]) best = i;
          }
          arg[b * plane + p] = best;
        }
      }
      break;
    case PoolMode::WindowMax:
      arg.resize(g.B * g.C * g.Ho * g.Wo);
      for (std::size_t bc = 0; bc < g.B * g.C; ++bc) {
        for (std::size_t oy = 0; oy < g.Ho; ++oy) {
          for (std::size_t ox = 0; ox < g.Wo; ++ox) {
            std::size_t best = bc * plane + oy * spec.stride * g.W + ox * spec.stride;
            for (std::size_t ky = 0; ky < spec.window; ++ky) {
              for (std::size_t kx = 0; kx < spec.window; ++kx) {
                const std::size_t i = bc * plane +
                                      (oy * spec.stride + ky) * g.W +
                                      ox * spec.stride + kx;
                if (x[i] > x[best]) best = i;
              }
            }
            arg[(bc * g.Ho + oy) * g.Wo + ox] = best;
          }
        }
      }
      break;
    default:
      break;
  }
  return arg;
}

template <typename S>
Tensor<S> pool(const Tensor<S>& x, const PoolSpec& spec) {
  const auto g = detail::pool_geometry(x, spec);
  Tensor<S> out(pooled_shape(x.shape(), spec));
  const std::size_t plane = g.H * g.W;
  switch (spec.mode) {
    case PoolMode::SpatialAvg:
      for (std::size_t bc = 0; bc < g.B * g.C; ++bc) {
        S sum = 0;
        for (std::size_t i = 0; i < plane; ++i) sum += x[bc * plane + i];
        out[bc] = sum / static_cast<S>(plane);
      }
      break;
    case PoolMode::ChannelAvg:
      for (std::size_t b = 0; b < g.B; ++b) {
        for (std::size_t p = 0; p < plane; ++p) {
          S sum = 0;
          for (std::size_t c = 0; c < g.C; ++c) sum += x[(b * g.C + c) * plane + p];
          out[b * plane + p] = sum / static_cast<S>(g.C);
        }
      }
      break;
    default: {
      const auto arg = pool_argmax(x, spec);
      for (std::size_t i = 0; i < arg.size(); ++i) out[i] = x[arg[i]];
    }
  }
  return out;
}

template <typename S>
Tensor<S> pool_backward(const Tensor<S>& x, const Tensor<S>& grad_out,
                        const PoolSpec& spec) {
  const auto g = detail::pool_geometry(x, spec);
  require_shape(grad_out, pooled_shape(x.shape(), spec), "pool_backward grad");
  Tensor<S> gx(x.shape());
  const std::size_t plane = g.H * g.W;
  switch (spec.mode) {
    case PoolMode::SpatialAvg:
      for (std::size_t bc = 0; bc < g.B * g.C; ++bc) {
        const S v = grad_out[bc] / static_cast<S>(plane);
        for (std::size_t i = 0; i < plane; ++i) gx[bc * plane + i] = v;
      }
      break;
    case PoolMode::ChannelAvg:
      for (std::size_t b = 0; b < g.B; ++b) {
        for (std::size_t p = 0; p < plane; ++p) {
          const S v = grad_out[b * plane + p] / static_cast<S>(g.C);
          for (std::size_t c = 0; c < g.C; ++c) gx[(b * g.C + c) * plane + p] = v;
        }
      }
      break;
    default: {
      const auto arg = pool_argmax(x, spec);
      for (std::size_t i = 0; i < arg.size(); ++i) gx[arg[i]] += grad_out[i];
    }
  }
  return gx;
}

}  // namespace dynfuse
