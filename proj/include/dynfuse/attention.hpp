#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

#include "dynfuse/core/activation.hpp"
#include "dynfuse/core/conv.hpp"
#include "dynfuse/core/dense.hpp"
#include "dynfuse/core/graph.hpp"
#include "dynfuse/core/parameter.hpp"
#include "dynfuse/core/pooling.hpp"
#include "dynfuse/core/rng.hpp"
#include "dynfuse/core/tensor_ops.hpp"

// Convolutional block attention: a channel gate computed from spatially
// pooled statistics, followed by a spatial gate computed from channel-pooled
// statistics.
//
//   channel gate  Mc = sigmoid(W1 relu(W0 avg) + W1 relu(W0 max))   [B,C,1,1]
//   spatial gate  Ms = sigmoid(conv_kxk([mean_c; max_c]) + b)        [B,1,H,W]
//   output        F' = Mc * F,  F'' = Ms(F') * F'
namespace dynfuse {

struct CbamConfig {
  std::size_t channels = 32;
  std::size_t reduction = 8;
  std::size_t spatial_kernel = 7;

  std::size_t hidden() const { return channels / reduction; }

  void validate() const {
    if (channels == 0 || reduction == 0) {
      throw ConfigError("cbam: channels and reduction must be positive");
    }
    if (channels % reduction != 0) {
      throw ConfigError("cbam: reduction " + std::to_string(reduction) +
                        " does not divide channels " + std::to_string(channels));
    }
    if (spatial_kernel % 2 == 0) {
      throw ConfigError("cbam: spatial kernel must be odd, got " +
                        std::to_string(spatial_kernel));
    }
  }
};

template <typename S>
struct CbamParams {
  Parameter<S> w0;         // [C/r, C]
  Parameter<S> w1;         // [C, C/r]
  Parameter<S> conv;       // [1, 2, k, k]
  Parameter<S> conv_bias;  // [1]

  static CbamParams zeros(const CbamConfig& cfg, const std::string& prefix = "cbam") {
    cfg.validate();
    const std::size_t C = cfg.channels, h = cfg.hidden(), k = cfg.spatial_kernel;
    return {{prefix + ".mlp.w0", Tensor<S>({h, C})},
            {prefix + ".mlp.w1", Tensor<S>({C, h})},
            {prefix + ".spatial.weight", Tensor<S>({1, 2, k, k})},
            {prefix + ".spatial.bias", Tensor<S>({1})}};
  }

  // He-uniform weights, zero bias. Each tensor draws from its own stream.
  static CbamParams init(const CbamConfig& cfg, std::uint64_t seed,
                         const std::string& prefix = "cbam") {
    auto p = zeros(cfg, prefix);
    const std::size_t k = cfg.spatial_kernel;
    Rng r0(derive_seed(seed, 1)), r1(derive_seed(seed, 2)), r2(derive_seed(seed, 3));
    p.w0.value = he_uniform<S>(p.w0.value.shape(), cfg.channels, r0);
    p.w1.value = he_uniform<S>(p.w1.value.shape(), cfg.hidden(), r1);
    p.conv.value = he_uniform<S>(p.conv.value.shape(), 2 * k * k, r2);
    return p;
  }

  void check(const CbamConfig& cfg) const {
    const std::size_t C = cfg.channels, h = cfg.hidden(), k = cfg.spatial_kernel;
    require_shape(w0.value, {h, C}, "cbam w0");
    require_shape(w1.value, {C, h}, "cbam w1");
    require_shape(conv.value, {1, 2, k, k}, "cbam spatial conv");
    require_shape(conv_bias.value, {1}, "cbam spatial bias");
  }
};

namespace detail {

template <typename S>
void require_channels(const Tensor<S>& F, const CbamParams<S>& p, const char* op) {
  require_rank(F, 4, op);
  if (F.dim(1) != p.w0.value.dim(1)) {
    throw ShapeError(std::string(op) + ": input " + to_string(F.shape()) +
                     " has " + std::to_string(F.dim(1)) +
                     " channels, parameters expect " +
                     std::to_string(p.w0.value.dim(1)));
  }
}

template <typename S>
Tensor<S> shared_mlp(const Tensor<S>& x, const CbamParams<S>& p) {
  return dense(relu(dense(x, p.w0.value)), p.w1.value);
}

}  // namespace detail

template <typename S>
Tensor<S> channel_attention(const Tensor<S>& F, const CbamParams<S>& p) {
  detail::require_channels(F, p, "channel_attention");
  const std::size_t B = F.dim(0), C = F.dim(1);
  const auto avg = pool(F, {PoolMode::SpatialAvg}).reshape({B, C});
  const auto mx = pool(F, {PoolMode::SpatialMax}).reshape({B, C});
  const auto logits = add(detail::shared_mlp(avg, p), detail::shared_mlp(mx, p));
  return sigmoid(logits).reshape({B, C, 1, 1});
}

template <typename S>
Tensor<S> spatial_attention(const Tensor<S>& F, const CbamParams<S>& p) {
  require_rank(F, 4, "spatial_attention");
  const std::size_t k = p.conv.value.dim(2);
  const auto stats = concat<S>(
      {pool(F, {PoolMode::ChannelAvg}), pool(F, {PoolMode::ChannelMax})}, 1);
  return sigmoid(conv2d(stats, p.conv.value, p.conv_bias.value, {1, (k - 1) / 2}));
}

template <typename S>
Tensor<S> cbam_apply(const Tensor<S>& F, const CbamParams<S>& p) {
  const auto F1 = broadcast_mul(F, channel_attention(F, p));
  return broadcast_mul(F1, spatial_attention(F1, p));
}

namespace ag {

template <typename S>
struct CbamVars {
  Var<S> w0, w1, conv, conv_bias;
};

template <typename S>
Var<S> channel_attention(Graph<S>& g, Var<S> F, const CbamVars<S>& p) {
  const auto& f = g.value(F);
  require_rank(f, 4, "channel_attention");
  const std::size_t B = f.dim(0), C = f.dim(1);
  auto mlp = [&](Var<S> x) {
    return dense(g, relu(g, dense(g, x, p.w0)), p.w1);
  };
  auto avg = reshape(g, pool(g, F, PoolSpec{PoolMode::SpatialAvg}), {B, C});
  auto mx = reshape(g, pool(g, F, PoolSpec{PoolMode::SpatialMax}), {B, C});
  return reshape(g, sigmoid(g, add(g, mlp(avg), mlp(mx))), {B, C, 1, 1});
}

template <typename S>
Var<S> spatial_attention(Graph<S>& g, Var<S> F, const CbamVars<S>& p) {
  const std::size_t k = g.value(p.conv).dim(2);
  auto stats = concat<S>(g,
                         {pool(g, F, PoolSpec{PoolMode::ChannelAvg}),
                          pool(g, F, PoolSpec{PoolMode::ChannelMax})},
                         1);
  return sigmoid(g, conv2d(g, stats, p.conv, p.conv_bias, {1, (k - 1) / 2}));
}

template <typename S>
Var<S> cbam_apply(Graph<S>& g, Var<S> F, const CbamVars<S>& p) {
  auto F1 = mul(g, F, channel_attention(g, F, p));
  return mul(g, F1, spatial_attention(g, F1, p));
}

}  // namespace ag
}  // namespace dynfuse
