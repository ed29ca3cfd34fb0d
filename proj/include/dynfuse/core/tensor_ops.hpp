#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "dynfuse/core/tensor.hpp"

// Shape manipulation and elementwise arithmetic with the library's single
// broadcast rule: shapes are aligned at their trailing dimensions, missing
// leading dimensions count as 1, and a dimension of extent 1 expands to match
// the other operand. Anything else is a ShapeError naming both shapes.
namespace dynfuse {

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("shape mismatch: cannot broadcast " + to_string(a) +
                       " with " + to_string(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

namespace detail {

// Strides of `shape` viewed inside `out` (zero along broadcast axes).
inline std::vector<std::size_t> broadcast_strides(const Shape& shape,
                                                  const Shape& out) {
  std::vector<std::size_t> st(out.size(), 0);
  const auto own = strides_of(shape);
  const std::size_t lead = out.size() - shape.size();
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] != 1) st[lead + i] = own[i];
  }
  return st;
}

template <typename S, typename Fn>
Tensor<S> broadcast_binary(const Tensor<S>& a, const Tensor<S>& b, Fn fn) {
  if (a.shape() == b.shape()) {
    Tensor<S> out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fn(a[i], b[i]);
    return out;
  }
  const Shape shape = broadcast_shape(a.shape(), b.shape());
  Tensor<S> out(shape);
  const auto sa = broadcast_strides(a.shape(), shape);
  const auto sb = broadcast_strides(b.shape(), shape);
  std::vector<std::size_t> idx(shape.size(), 0);
  std::size_t oa = 0, ob = 0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = fn(a[oa], b[ob]);
    for (std::size_t ax = shape.size(); ax-- > 0;) {
      if (++idx[ax] < shape[ax]) {
        oa += sa[ax];
        ob += sb[ax];
        break;
      }
      oa -= sa[ax] * (shape[ax] - 1);
      ob -= sb[ax] * (shape[ax] - 1);
      idx[ax] = 0;
    }
  }
  return out;
}

}  // namespace detail

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::broadcast_binary(a, b, [](S x, S y) { return x + y; });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::broadcast_binary(a, b, [](S x, S y) { return x - y; });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::broadcast_binary(a, b, [](S x, S y) { return x * y; });
}

// Same operation as mul; named for call sites that gate a feature map with a
// lower-rank attention map.
template <typename S>
Tensor<S> broadcast_mul(const Tensor<S>& a, const Tensor<S>& b) {
  return mul(a, b);
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S s) {
  Tensor<S> out = a;
  for (auto& x : out.data()) x *= s;
  return out;
}

// Sums `grad` (shaped like a broadcast result) back down to `target`.
template <typename S>
Tensor<S> reduce_to(const Tensor<S>& grad, const Shape& target) {
  if (grad.shape() == target) return grad;
  const Shape& shape = grad.shape();
  if (broadcast_shape(target, shape) != shape) {
    throw ShapeError("cannot reduce " + to_string(shape) + " to " +
                     to_string(target));
  }
  Tensor<S> out(target);
  const auto st = detail::broadcast_strides(target, shape);
  std::vector<std::size_t> idx(shape.size(), 0);
  std::size_t o = 0;
  for (std::size_t i = 0; i < grad.size(); ++i) {
    out[o] += grad[i];
    for (std::size_t ax = shape.size(); ax-- > 0;) {
      if (++idx[ax] < shape[ax]) {
        o += st[ax];
        break;
      }
      o -= st[ax] * (shape[ax] - 1);
      idx[ax] = 0;
    }
  }
  return out;
}

template <typename S>
struct BinaryGrads {
  Tensor<S> a;
  Tensor<S> b;
};

template <typename S>
BinaryGrads<S> add_backward(const Tensor<S>& a, const Tensor<S>& b,
                            const Tensor<S>& grad_out) {
  return {reduce_to(grad_out, a.shape()), reduce_to(grad_out, b.shape())};
}

template <typename S>
BinaryGrads<S> mul_backward(const Tensor<S>& a, const Tensor<S>& b,
                            const Tensor<S>& grad_out) {
  return {reduce_to(mul(grad_out, b), a.shape()),
          reduce_to(mul(grad_out, a), b.shape())};
}

// Half-open range [begin, end) along `axis`.
template <typename S>
Tensor<S> slice(const Tensor<S>& t, std::size_t axis, std::size_t begin,
                std::size_t end) {
  if (axis >= t.rank() || begin >= end || end > t.dim(axis)) {
    throw ShapeError("invalid slice [" + std::to_string(begin) + "," +
                     std::to_string(end) + ") on axis " + std::to_string(axis) +
                     " of " + to_string(t.shape()));
  }
  Shape shape = t.shape();
  shape[axis] = end - begin;
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= t.dim(i);
  for (std::size_t i = axis + 1; i < t.rank(); ++i) inner *= t.dim(i);
  Tensor<S> out(shape);
  const std::size_t n = (end - begin) * inner;
  for (std::size_t o = 0; o < outer; ++o) {
    const S* src = t.ptr() + (o * t.dim(axis) + begin) * inner;
    std::copy(src, src + n, out.ptr() + o * n);
  }
  return out;
}

template <typename S>
Tensor<S> slice_backward(const Tensor<S>& grad_out, const Shape& full,
                         std::size_t axis, std::size_t begin) {
  Tensor<S> out(full);
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= full[i];
  for (std::size_t i = axis + 1; i < full.size(); ++i) inner *= full[i];
  const std::size_t n = grad_out.dim(axis) * inner;
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy(grad_out.ptr() + o * n, grad_out.ptr() + (o + 1) * n,
              out.ptr() + (o * full[axis] + begin) * inner);
  }
  return out;
}

template <typename S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  Shape shape = parts.front().shape();
  if (axis >= shape.size()) throw ShapeError("concat axis out of range");
  shape[axis] = 0;
  for (const auto& p : parts) {
    Shape a = p.shape(), b = parts.front().shape();
    if (a.size() != b.size()) {
      throw ShapeError("concat rank mismatch: " + to_string(a) + " vs " +
                       to_string(b));
    }
    a[axis] = b[axis] = 0;
    if (a != b) {
      throw ShapeError("concat shape mismatch: " + to_string(p.shape()) +
                       " vs " + to_string(parts.front().shape()));
    }
    shape[axis] += p.dim(axis);
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  Tensor<S> out(shape);
  S* dst = out.ptr();
  for (std::size_t o = 0; o < outer; ++o) {
    for (const auto& p : parts) {
      const std::size_t n = p.dim(axis) * inner;
      std::copy(p.ptr() + o * n, p.ptr() + (o + 1) * n, dst);
      dst += n;
    }
  }
  return out;
}

// Swaps the two leading axes: [A,B,...] -> [B,A,...]. Self-adjoint, so the
// same call maps gradients back.
template <typename S>
Tensor<S> transpose01(const Tensor<S>& t) {
  if (t.rank() < 2) {
    throw ShapeError("transpose01 needs rank >= 2, got " + to_string(t.shape()));
  }
  Shape shape = t.shape();
  std::swap(shape[0], shape[1]);
  const std::size_t a = t.dim(0), b = t.dim(1);
  const std::size_t inner = t.size() / (a * b);
  Tensor<S> out(shape);
  for (std::size_t i = 0; i < a; ++i) {
    for (std::size_t j = 0; j < b; ++j) {
      const S* src = t.ptr() + (i * b + j) * inner;
      std::copy(src, src + inner, out.ptr() + (j * a + i) * inner);
    }
  }
  return out;
}

}  // namespace dynfuse
