#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dynfuse/core/error.hpp"

namespace dynfuse {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// Dense row-major array. Every extent is positive and data().size() equals
// the product of the extents. A default-constructed tensor is the empty
// placeholder (rank 0, no data) and is not a valid operand.
template <typename S>
class Tensor {
 public:
  using value_type = S;

  Tensor() = default;

  explicit Tensor(Shape shape, S fill = S{0}) : shape_(std::move(shape)) {
    validate_extents();
    data_.assign(numel(shape_), fill);
  }

  Tensor(Shape shape, std::vector<S> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    validate_extents();
    if (data_.size() != numel(shape_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + to_string(shape_));
    }
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), S{0}); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), S{1}); }
  static Tensor full(Shape shape, S v) { return Tensor(std::move(shape), v); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<S> data() noexcept { return data_; }
  std::span<const S> data() const noexcept { return data_; }
  const std::vector<S>& vec() const noexcept { return data_; }
  S* ptr() noexcept { return data_.data(); }
  const S* ptr() const noexcept { return data_.data(); }

  S& operator[](std::size_t i) { return data_[i]; }
  const S& operator[](std::size_t i) const { return data_[i]; }

  S& at(std::initializer_list<std::size_t> idx) { return data_[offset(idx)]; }
  const S& at(std::initializer_list<std::size_t> idx) const {
    return data_[offset(idx)];
  }

  // Row-major order is preserved; only the extents change.
  Tensor reshape(Shape shape) const {
    if (numel(shape) != data_.size()) {
      throw ShapeError("cannot reshape " + to_string(shape_) + " to " +
                       to_string(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  template <typename T>
  Tensor<T> cast() const {
    std::vector<T> out(data_.begin(), data_.end());
    return Tensor<T>(shape_, std::move(out));
  }

  void fill(S v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](S x) { return std::isfinite(x); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void validate_extents() const {
    for (std::size_t e : shape_) {
      if (e == 0) {
        throw ShapeError("tensor extents must be positive, got " +
                         to_string(shape_));
      }
    }
  }

  std::size_t offset(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != shape_.size()) {
      throw ShapeError("index rank " + std::to_string(idx.size()) +
                       " does not match tensor shape " + to_string(shape_));
    }
    std::size_t off = 0;
    std::size_t axis = 0;
    for (std::size_t i : idx) {
      if (i >= shape_[axis]) {
        throw ShapeError("index out of range on axis " + std::to_string(axis) +
                         " of " + to_string(shape_));
      }
      off = off * shape_[axis] + i;
      ++axis;
    }
    return off;
  }

  Shape shape_;
  std::vector<S> data_;
};

template <typename S>
void check_finite(const Tensor<S>& t, const std::string& op) {
  if (!t.all_finite()) {
    throw NumericError(op + " produced a non-finite value");
  }
}

template <typename S>
void require_shape(const Tensor<S>& t, const Shape& expected,
                   const std::string& what) {
  if (t.shape() != expected) {
    throw ShapeError(what + ": expected shape " + to_string(expected) +
                     ", got " + to_string(t.shape()));
  }
}

template <typename S>
void require_rank(const Tensor<S>& t, std::size_t rank,
                  const std::string& what) {
  if (t.rank() != rank) {
    throw ShapeError(what + ": expected rank " + std::to_string(rank) +
                     " tensor, got shape " + to_string(t.shape()));
  }
}

// Row-major strides for a shape.
inline std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> st(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) st[i - 1] = st[i] * shape[i];
  return st;
}

}  // namespace dynfuse
