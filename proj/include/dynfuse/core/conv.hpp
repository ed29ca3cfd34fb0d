#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <string>
#include <vector>

#include "dynfuse/core/tensor.hpp"

// 2D and 3D convolution with zero padding. Cross-correlation semantics (the
// kernel is not flipped), matching the usual deep-learning convention.
namespace dynfuse {

struct ConvOptions {
  std::size_t stride = 1;
  std::size_t pad = 0;
};

template <typename S>
struct ConvGrads {
  Tensor<S> input;   // empty unless requested
  Tensor<S> kernel;
  Tensor<S> bias;
};

namespace detail {

// Geometry of a volumetric convolution; 2D calls use depth 1, kd 1, pad 0.
struct ConvGeom {
  std::size_t batch, in_ch, out_ch;
  std::array<std::size_t, 3> in, k, out, stride, pad;
};

inline std::size_t conv_extent(std::size_t n, std::size_t k, std::size_t stride,
                               std::size_t pad, const char* op) {
  if (stride == 0) throw ShapeError(std::string(op) + ": stride must be >= 1");
  if (k > n + 2 * pad) {
    throw ShapeError(std::string(op) + ": kernel extent " + std::to_string(k) +
                     " exceeds padded input extent " +
                     std::to_string(n + 2 * pad));
  }
  if ((n + 2 * pad - k) % stride != 0) {
    throw ShapeError(std::string(op) + ": non-integer output extent for input " +
                     std::to_string(n) + ", kernel " + std::to_string(k) +
                     ", stride " + std::to_string(stride) + ", pad " +
                     std::to_string(pad));
  }
  return (n + 2 * pad - k) / stride + 1;
}

// Output indices o with 0 <= o*stride + k - pad < n, as [lo, hi).
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t n_out,
                                                       std::size_t n_in,
                                                       std::size_t k,
                                                       std::size_t stride,
                                                       std::size_t pad) {
  std::size_t lo = 0;
  if (pad > k) lo = (pad - k + stride - 1) / stride;
  // largest o with o*stride + k <= n_in - 1 + pad
  if (k > n_in - 1 + pad) return {0, 0};
  std::size_t hi = (n_in - 1 + pad - k) / stride + 1;
  hi = std::min(hi, n_out);
  if (lo >= hi) return {0, 0};
  return {lo, hi};
}

template <typename S>
ConvGeom conv_geometry(const Tensor<S>& input, const Tensor<S>& kernel,
                       const Tensor<S>& bias, std::array<std::size_t, 3> stride,
                       std::array<std::size_t, 3> pad, bool volumetric,
                       const char* op) {
  const std::size_t rank = volumetric ? 5 : 4;
  require_rank(input, rank, std::string(op) + " input");
  require_rank(kernel, rank, std::string(op) + " kernel");
  if (kernel.dim(1) != input.dim(1)) {
    throw ShapeError(std::string(op) + ": channel mismatch, input " +
                     to_string(input.shape()) + " vs kernel " +
                     to_string(kernel.shape()));
  }
  require_shape(bias, {kernel.dim(0)}, std::string(op) + " bias");
  ConvGeom g{};
  g.batch = input.dim(0);
  g.in_ch = input.dim(1);
  g.out_ch = kernel.dim(0);
  g.stride = stride;
  g.pad = pad;
  if (volumetric) {
    g.in = {input.dim(2), input.dim(3), input.dim(4)};
    g.k = {kernel.dim(2), kernel.dim(3), kernel.dim(4)};
  } else {
    g.in = {1, input.dim(2), input.dim(3)};
    g.k = {1, kernel.dim(2), kernel.dim(3)};
  }
  for (int a = 0; a < 3; ++a) {
    g.out[a] = conv_extent(g.in[a], g.k[a], g.stride[a], g.pad[a], op);
  }
  return g;
}

// Column matrix [C*kd*kh*kw, Do*Ho*Wo] of one sample; padded taps are zero.
template <typename S>
void im2col(const S* x, const ConvGeom& g, S* col) {
  const auto [D, H, W] = g.in;
  const auto [kd, kh, kw] = g.k;
  const auto [Do, Ho, Wo] = g.out;
  const std::size_t P = Do * Ho * Wo, sw = g.stride[2];
  std::size_t r = 0;
  for (std::size_t c = 0; c < g.in_ch; ++c) {
    const S* xc = x + c * D * H * W;
    for (std::size_t z = 0; z < kd; ++z) {
      const auto [zlo, zhi] = valid_range(Do, D, z, g.stride[0], g.pad[0]);
      for (std::size_t y = 0; y < kh; ++y) {
        const auto [ylo, yhi] = valid_range(Ho, H, y, g.stride[1], g.pad[1]);
        for (std::size_t xk = 0; xk < kw; ++xk, ++r) {
          const auto [xlo, xhi] = valid_range(Wo, W, xk, sw, g.pad[2]);
          S* row = col + r * P;
          std::fill(row, row + P, S{0});
          if (xlo >= xhi) continue;
          for (std::size_t oz = zlo; oz < zhi; ++oz) {
            const std::size_t iz = oz * g.stride[0] + z - g.pad[0];
            for (std::size_t oy = ylo; oy < yhi; ++oy) {
              const std::size_t iy = oy * g.stride[1] + y - g.pad[1];
              S* orow = row + (oz * Ho + oy) * Wo;
              const S* irow = xc + (iz * H + iy) * W + xlo * sw + xk - g.pad[2];
              for (std::size_t ox = xlo; ox < xhi; ++ox) orow[ox] = irow[(ox - xlo) * sw];
            }
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-adds the column matrix back into the sample.
template <typename S>
void col2im_add(const S* col, const ConvGeom& g, S* gx) {
  const auto [D, H, W] = g.in;
  const auto [kd, kh, kw] = g.k;
  const auto [Do, Ho, Wo] = g.out;
  const std::size_t P = Do * Ho * Wo, sw = g.stride[2];
  std::size_t r = 0;
  for (std::size_t c = 0; c < g.in_ch; ++c) {
    S* gc = gx + c * D * H * W;
    for (std::size_t z = 0; z < kd; ++z) {
      const auto [zlo, zhi] = valid_range(Do, D, z, g.stride[0], g.pad[0]);
      for (std::size_t y = 0; y < kh; ++y) {
        const auto [ylo, yhi] = valid_range(Ho, H, y, g.stride[1], g.pad[1]);
        for (std::size_t xk = 0; xk < kw; ++xk, ++r) {
          const auto [xlo, xhi] = valid_range(Wo, W, xk, sw, g.pad[2]);
          if (xlo >= xhi) continue;
          const S* row = col + r * P;
          for (std::size_t oz = zlo; oz < zhi; ++oz) {
            const std::size_t iz = oz * g.stride[0] + z - g.pad[0];
            for (std::size_t oy = ylo; oy < yhi; ++oy) {
              const std::size_t iy = oy * g.stride[1] + y - g.pad[1];
              const S* orow = row + (oz * Ho + oy) * Wo;
              S* irow = gc + (iz * H + iy) * W + xlo * sw + xk - g.pad[2];
              for (std::size_t ox = xlo; ox < xhi; ++ox) irow[(ox - xlo) * sw] += orow[ox];
            }
          }
        }
      }
    }
  }
}

// Dot product with four fixed partial sums (same order on every run).
template <typename S>
S dot4(const S* a, const S* b, std::size_t n) {
  S s0 = 0, s1 = 0, s2 = 0, s3 = 0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

// Samples per im2col block, keeping the column buffer near 4M scalars.
inline std::size_t conv_block(const ConvGeom& g, std::size_t R, std::size_t P) {
  const std::size_t per = std::max<std::size_t>(1, R * P);
  return std::clamp<std::size_t>((std::size_t{1} << 22) / per, 1, g.batch);
}

// Rows of the block's column matrix have length nb*P: sample-major, then
// output position.
template <typename S>
void block_im2col(const Tensor<S>& input, const ConvGeom& g, std::size_t b0, std::size_t nb,
                  std::size_t R, std::size_t P, std::vector<S>& col, std::vector<S>& tmp) {
  const std::size_t in_sample = g.in_ch * g.in[0] * g.in[1] * g.in[2];
  const std::size_t L = nb * P;
  col.resize(R * L);
  if (nb == 1) {
    im2col(input.ptr() + b0 * in_sample, g, col.data());
    return;
  }
  tmp.resize(R * P);
  for (std::size_t j = 0; j < nb; ++j) {
    im2col(input.ptr() + (b0 + j) * in_sample, g, tmp.data());
    for (std::size_t r = 0; r < R; ++r)
      std::copy(tmp.data() + r * P, tmp.data() + (r + 1) * P, col.data() + r * L + j * P);
  }
}

template <typename S>
Tensor<S> conv_forward(const Tensor<S>& input, const Tensor<S>& kernel,
                       const Tensor<S>& bias, const ConvGeom& g,
                       Shape out_shape) {
  Tensor<S> out(std::move(out_shape));
  const std::size_t R = g.in_ch * g.k[0] * g.k[1] * g.k[2];
  const std::size_t P = g.out[0] * g.out[1] * g.out[2];
  const std::size_t block = conv_block(g, R, P);
  std::vector<S> col, tmp, acc;
  for (std::size_t b0 = 0; b0 < g.batch; b0 += block) {
    const std::size_t nb = std::min(block, g.batch - b0), L = nb * P;
    block_im2col(input, g, b0, nb, R, P, col, tmp);
    acc.resize(L);
    for (std::size_t f = 0; f < g.out_ch; ++f) {
      std::fill(acc.begin(), acc.end(), bias[f]);
      const S* w = kernel.ptr() + f * R;
      for (std::size_t r = 0; r < R; ++r) {
        const S wv = w[r];
        const S* row = col.data() + r * L;
        S* o = acc.data();
        for (std::size_t p = 0; p < L; ++p) o[p] += wv * row[p];
      }
      for (std::size_t j = 0; j < nb; ++j)
        std::copy(acc.data() + j * P, acc.data() + (j + 1) * P,
                  out.ptr() + ((b0 + j) * g.out_ch + f) * P);
    }
  }
  return out;
}

template <typename S>
ConvGrads<S> conv_backward(const Tensor<S>& input, const Tensor<S>& kernel,
                           const Tensor<S>& grad_out, const ConvGeom& g,
                           bool need_input_grad) {
  ConvGrads<S> grads;
  grads.kernel = Tensor<S>(kernel.shape());
  grads.bias = Tensor<S>({g.out_ch});
  if (need_input_grad) grads.input = Tensor<S>(input.shape());
  const std::size_t R = g.in_ch * g.k[0] * g.k[1] * g.k[2];
  const std::size_t P = g.out[0] * g.out[1] * g.out[2];
  const std::size_t in_sample = g.in_ch * g.in[0] * g.in[1] * g.in[2];
  const std::size_t block = conv_block(g, R, P);
  std::vector<S> col, tmp, go, gcol;
  for (std::size_t b0 = 0; b0 < g.batch; b0 += block) {
    const std::size_t nb = std::min(block, g.batch - b0), L = nb * P;
    block_im2col(input, g, b0, nb, R, P, col, tmp);
    go.resize(L);
    if (need_input_grad) gcol.assign(R * L, S{0});
    for (std::size_t f = 0; f < g.out_ch; ++f) {
      for (std::size_t j = 0; j < nb; ++j) {
        const S* src = grad_out.ptr() + ((b0 + j) * g.out_ch + f) * P;
        std::copy(src, src + P, go.data() + j * P);
      }
      S bsum = 0;
      for (std::size_t p = 0; p < L; ++p) bsum += go[p];
      grads.bias[f] += bsum;
      const S* w = kernel.ptr() + f * R;
      S* gw = grads.kernel.ptr() + f * R;
      for (std::size_t r = 0; r < R; ++r) {
        gw[r] += dot4(go.data(), col.data() + r * L, L);
        if (need_input_grad) {
          const S wv = w[r];
          S* grow = gcol.data() + r * L;
          for (std::size_t p = 0; p < L; ++p) grow[p] += wv * go[p];
        }
      }
    }
    if (!need_input_grad) continue;
    for (std::size_t j = 0; j < nb; ++j) {
      const S* src = gcol.data() + j * P;
      if (nb > 1) {
        tmp.resize(R * P);
        for (std::size_t r = 0; r < R; ++r)
          std::copy(gcol.data() + r * L + j * P, gcol.data() + r * L + (j + 1) * P,
                    tmp.data() + r * P);
        src = tmp.data();
      }
      col2im_add(src, g, grads.input.ptr() + (b0 + j) * in_sample);
    }
  }
  return grads;
}

}  // namespace detail

// input [B,C,H,W], kernel [F,C,kh,kw], bias [F] -> [B,F,H',W'] with
// H' = (H + 2*pad - kh) / stride + 1; a non-zero remainder is an error.
template <typename S>
Tensor<S> conv2d(const Tensor<S>& input, const Tensor<S>& kernel,
                 const Tensor<S>& bias, ConvOptions opt = {}) {
  const auto g = detail::conv_geometry(input, kernel, bias,
                                       {1, opt.stride, opt.stride},
                                       {0, opt.pad, opt.pad}, false, "conv2d");
  auto out = detail::conv_forward(input, kernel, bias, g,
                                  {g.batch, g.out_ch, g.out[1], g.out[2]});
  check_finite(out, "conv2d");
  return out;
}

template <typename S>
ConvGrads<S> conv2d_backward(const Tensor<S>& input, const Tensor<S>& kernel,
                             const Tensor<S>& grad_out, ConvOptions opt = {},
                             bool need_input_grad = true) {
  const Tensor<S> no_bias({kernel.dim(0)});
  const auto g = detail::conv_geometry(input, kernel, no_bias,
                                       {1, opt.stride, opt.stride},
                                       {0, opt.pad, opt.pad}, false, "conv2d");
  require_shape(grad_out, {g.batch, g.out_ch, g.out[1], g.out[2]},
                "conv2d_backward grad");
  return detail::conv_backward(input, kernel, grad_out, g, need_input_grad);
}

// input [B,C,D,H,W], kernel [F,C,kd,kh,kw], bias [F]. Kernel extents may
// differ per axis; stride and pad are shared by all three axes.
template <typename S>
Tensor<S> conv3d(const Tensor<S>& input, const Tensor<S>& kernel,
                 const Tensor<S>& bias, ConvOptions opt = {}) {
  const auto g = detail::conv_geometry(
      input, kernel, bias, {opt.stride, opt.stride, opt.stride},
      {opt.pad, opt.pad, opt.pad}, true, "conv3d");
  auto out = detail::conv_forward(
      input, kernel, bias, g, {g.batch, g.out_ch, g.out[0], g.out[1], g.out[2]});
  check_finite(out, "conv3d");
  return out;
}

template <typename S>
ConvGrads<S> conv3d_backward(const Tensor<S>& input, const Tensor<S>& kernel,
                             const Tensor<S>& grad_out, ConvOptions opt = {},
                             bool need_input_grad = true) {
  const Tensor<S> no_bias({kernel.dim(0)});
  const auto g = detail::conv_geometry(
      input, kernel, no_bias, {opt.stride, opt.stride, opt.stride},
      {opt.pad, opt.pad, opt.pad}, true, "conv3d");
  require_shape(grad_out, {g.batch, g.out_ch, g.out[0], g.out[1], g.out[2]},
                "conv3d_backward grad");
  return detail::conv_backward(input, kernel, grad_out, g, need_input_grad);
}

}  // namespace dynfuse
