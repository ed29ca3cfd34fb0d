#pragma once

#include <cmath>

#include "dynfuse/core/tensor.hpp"

namespace dynfuse {

enum class Activation { Relu, Sigmoid };

// Branching form: exp() is only ever taken of a non-positive argument.
template <typename S>
S sigmoid(S x) noexcept {
  if (x >= S{0}) return S{1} / (S{1} + std::exp(-x));
  const S e = std::exp(x);
  return e / (S{1} + e);
}

template <typename S>
Tensor<S> activate(const Tensor<S>& x, Activation kind) {
  Tensor<S> out(x.shape());
  if (kind == Activation::Relu) {
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > S{0} ? x[i] : S{0};
  } else {
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = sigmoid(x[i]);
  }
  check_finite(out, kind == Activation::Relu ? "relu" : "sigmoid");
  return out;
}

template <typename S>
Tensor<S> relu(const Tensor<S>& x) {
  return activate(x, Activation::Relu);
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& x) {
  return activate(x, Activation::Sigmoid);
}

// Gradient w.r.t. the activation input. The relu subgradient at exactly 0 is
// 0; sigmoid uses its output y via y(1-y).
template <typename S>
Tensor<S> activate_backward(const Tensor<S>& x, const Tensor<S>& grad_out,
                            Activation kind) {
  require_shape(grad_out, x.shape(), "activation backward");
  Tensor<S> gx(x.shape());
  if (kind == Activation::Relu) {
    for (std::size_t i = 0; i < x.size(); ++i) {
      gx[i] = x[i] > S{0} ? grad_out[i] : S{0};
    }
  } else {
    for (std::size_t i = 0; i < x.size(); ++i) {
      const S y = sigmoid(x[i]);
      gx[i] = grad_out[i] * y * (S{1} - y);
    }
  }
  return gx;
}

}  // namespace dynfuse
