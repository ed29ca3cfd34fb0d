#pragma once

#include <cmath>
#include <string>
#include <utility>

#include "dynfuse/core/rng.hpp"
#include "dynfuse/core/tensor.hpp"

namespace dynfuse {

template <typename S>
struct Parameter {
  std::string name;
  Tensor<S> value;
  Tensor<S> grad;

  Parameter() = default;
  Parameter(std::string n, Tensor<S> v)
      : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { grad.fill(S{0}); }
};

// He-style fan-in scaled uniform: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
template <typename S>
Tensor<S> he_uniform(const Shape& shape, std::size_t fan_in, Rng& rng) {
  Tensor<S> t(shape);
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (auto& x : t.data()) x = static_cast<S>(rng.uniform(-bound, bound));
  return t;
}

template <typename S>
Tensor<S> uniform_tensor(const Shape& shape, double lo, double hi, Rng& rng) {
  Tensor<S> t(shape);
  for (auto& x : t.data()) x = static_cast<S>(rng.uniform(lo, hi));
  return t;
}

}  // namespace dynfuse
