#pragma once

#include <cmath>
#include <cstddef>

#include "dynfuse/core/tensor.hpp"

namespace dynfuse {

// out[B,m] = input[B,n] * weight[m,n]^T + bias[m]. An empty bias means none.
template <typename S>
Tensor<S> dense(const Tensor<S>& input, const Tensor<S>& weight,
                const Tensor<S>& bias = {}) {
  require_rank(input, 2, "dense input");
  require_rank(weight, 2, "dense weight");
  const std::size_t B = input.dim(0), n = input.dim(1), m = weight.dim(0);
  if (weight.dim(1) != n) {
    throw ShapeError("dense: shape mismatch, input " + to_string(input.shape()) +
                     " vs weight " + to_string(weight.shape()));
  }
  if (!bias.empty()) require_shape(bias, {m}, "dense bias");
  Tensor<S> out({B, m});
  for (std::size_t b = 0; b < B; ++b) {
    const S* x = input.ptr() + b * n;
    for (std::size_t j = 0; j < m; ++j) {
      const S* w = weight.ptr() + j * n;
      S acc = bias.empty() ? S{0} : bias[j];
      for (std::size_t i = 0; i < n; ++i) acc += x[i] * w[i];
      out[b * m + j] = acc;
    }
  }
  check_finite(out, "dense");
  return out;
}

template <typename S>
struct DenseGrads {
  Tensor<S> input;
  Tensor<S> weight;
  Tensor<S> bias;
};

template <typename S>
DenseGrads<S> dense_backward(const Tensor<S>& input, const Tensor<S>& weight,
                             const Tensor<S>& grad_out) {
  const std::size_t B = input.dim(0), n = input.dim(1), m = weight.dim(0);
  require_shape(grad_out, {B, m}, "dense_backward grad");
  DenseGrads<S> g{Tensor<S>(input.shape()), Tensor<S>(weight.shape()),
                  Tensor<S>({m})};
  for (std::size_t b = 0; b < B; ++b) {
    const S* x = input.ptr() + b * n;
    S* gx = g.input.ptr() + b * n;
    for (std::size_t j = 0; j < m; ++j) {
      const S go = grad_out[b * m + j];
      const S* w = weight.ptr() + j * n;
      S* gw = g.weight.ptr() + j * n;
      g.bias[j] += go;
      for (std::size_t i = 0; i < n; ++i) {
        gx[i] += go * w[i];
        gw[i] += go * x[i];
      }
    }
  }
  return g;
}

}  // namespace dynfuse
