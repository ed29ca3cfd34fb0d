#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "dynfuse/attention.hpp"
#include "dynfuse/core/grad_check.hpp"
#include "support/oracles.hpp"

using namespace dynfuse;
using T = Tensor<double>;
using P = CbamParams<double>;

namespace {

P random_params(const CbamConfig& cfg, Rng& rng) {
  auto p = P::zeros(cfg);
  for (auto* t : {&p.w0.value, &p.w1.value, &p.conv.value, &p.conv_bias.value})
    for (auto& x : t->data()) x = rng.uniform(-1.0, 1.0);
  return p;
}

// Channel gate written out element by element.
T channel_gate_oracle(const T& F, const P& p) {
  const std::size_t B = F.dim(0), C = F.dim(1), HW = F.dim(2) * F.dim(3);
  const std::size_t h = p.w0.value.dim(0);
  T out({B, C, 1, 1});
  for (std::size_t b = 0; b < B; ++b) {
    std::vector<double> avg(C, 0.0), mx(C, -1e300);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < HW; ++i) {
        const double v = F[(b * C + c) * HW + i];
        avg[c] += v / double(HW);
        mx[c] = std::max(mx[c], v);
      }
    auto mlp = [&](const std::vector<double>& x) {
      std::vector<double> hid(h, 0.0), y(C, 0.0);
      for (std::size_t j = 0; j < h; ++j) {
        for (std::size_t c = 0; c < C; ++c) hid[j] += p.w0.value.at({j, c}) * x[c];
        hid[j] = std::max(0.0, hid[j]);
      }
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t j = 0; j < h; ++j) y[c] += p.w1.value.at({c, j}) * hid[j];
      return y;
    };
    const auto ya = mlp(avg), ym = mlp(mx);
    for (std::size_t c = 0; c < C; ++c) out[b * C + c] = oracle::sigmoid(ya[c] + ym[c]);
  }
  return out;
}

T spatial_gate_oracle(const T& F, const P& p) {
  const std::size_t B = F.dim(0), C = F.dim(1), H = F.dim(2), W = F.dim(3);
  T stats({B, 2, H, W});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        double s = 0.0, m = -1e300;
        for (std::size_t c = 0; c < C; ++c) {
          s += F.at({b, c, y, x});
          m = std::max(m, F.at({b, c, y, x}));
        }
        stats.at({b, 0, y, x}) = s / double(C);
        stats.at({b, 1, y, x}) = m;
      }
  const std::size_t k = p.conv.value.dim(2);
  auto z = oracle::conv2d(stats, p.conv.value, p.conv_bias.value, 1, (k - 1) / 2);
  for (auto& v : z.data()) v = oracle::sigmoid(v);
  return z;
}

double max_abs_diff(const T& a, const T& b) {
  EXPECT_EQ(a.shape(), b.shape());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST(CbamConfig, Validation) {
  EXPECT_THROW((CbamConfig{12, 8, 7}.validate()), ConfigError);
  EXPECT_THROW((CbamConfig{16, 8, 6}.validate()), ConfigError);
  EXPECT_NO_THROW((CbamConfig{16, 8, 7}.validate()));
  EXPECT_EQ((CbamConfig{256, 8, 7}.hidden()), 32u);
}

TEST(ChannelAttention, ZeroParamsGiveOneHalf) {
  Rng rng(1);
  const CbamConfig cfg{16, 8, 7};
  const auto g = channel_attention(oracle::random_tensor({2, 16, 5, 5}, rng), P::zeros(cfg));
  EXPECT_EQ(g.shape(), (Shape{2, 16, 1, 1}));
  for (double v : g.data()) EXPECT_EQ(v, 0.5);
}

TEST(ChannelAttention, MatchesFormulaOracle) {
  Rng rng(2);
  const CbamConfig cfg{8, 4, 3};
  for (int trial = 0; trial < 10; ++trial) {
    const auto p = random_params(cfg, rng);
    const auto F = oracle::random_tensor({2, 8, 4, 3}, rng);
    EXPECT_LE(max_abs_diff(channel_attention(F, p), channel_gate_oracle(F, p)), 1e-12);
  }
}

TEST(ChannelAttention, ChannelMismatchIsShapeError) {
  EXPECT_THROW(channel_attention(T({1, 4, 3, 3}), P::zeros({8, 4, 3})), ShapeError);
}

TEST(SpatialAttention, ZeroParamsGiveOneHalf) {
  Rng rng(3);
  const auto g = spatial_attention(oracle::random_tensor({2, 8, 6, 5}, rng),
                                   P::zeros({8, 8, 7}));
  EXPECT_EQ(g.shape(), (Shape{2, 1, 6, 5}));
  for (double v : g.data()) EXPECT_EQ(v, 0.5);
}

TEST(SpatialAttention, MatchesFormulaOracle) {
  Rng rng(4);
  for (std::size_t k : {3u, 7u}) {
    const CbamConfig cfg{4, 2, k};
    const auto p = random_params(cfg, rng);
    const auto F = oracle::random_tensor({2, 4, 5, 6}, rng);
    EXPECT_LE(max_abs_diff(spatial_attention(F, p), spatial_gate_oracle(F, p)), 1e-12);
  }
}

TEST(Cbam, ZeroParamsScaleByQuarterExactly) {
  Rng rng(5);
  const auto F = oracle::random_tensor({2, 16, 4, 4}, rng);
  const auto out = cbam_apply(F, P::zeros({16, 8, 7}));
  EXPECT_EQ(out, scale(F, 0.25));
}

TEST(Cbam, InvariantsOnRandomCases) {
  Rng rng(6);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t C = 8 * (1 + rng.below(2)), H = 1 + rng.below(6), W = 1 + rng.below(6);
    const CbamConfig cfg{C, 8, 1 + 2 * rng.below(4)};
    const auto p = random_params(cfg, rng);
    const auto F = oracle::random_tensor({1 + rng.below(2), C, H, W}, rng, -3.0, 3.0);

    const auto mc = channel_attention(F, p), ms = spatial_attention(F, p);
    for (double v : mc.data()) EXPECT_TRUE(v > 0.0 && v < 1.0);
    for (double v : ms.data()) EXPECT_TRUE(v > 0.0 && v < 1.0);

    const auto out = cbam_apply(F, p);
    ASSERT_EQ(out.shape(), F.shape());
    for (std::size_t i = 0; i < F.size(); ++i) EXPECT_LE(std::abs(out[i]), std::abs(F[i]));

    // spatial permutation leaves the channel gate unchanged
    std::vector<std::size_t> perm(H * W);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    rng.shuffle(std::span<std::size_t>(perm));
    T Fs(F.shape());
    for (std::size_t bc = 0; bc < F.dim(0) * C; ++bc)
      for (std::size_t i = 0; i < H * W; ++i) Fs[bc * H * W + i] = F[bc * H * W + perm[i]];
    EXPECT_LE(max_abs_diff(channel_attention(Fs, p), mc), 1e-15);

    // channel permutation leaves the spatial gate unchanged
    std::vector<std::size_t> cp(C);
    std::iota(cp.begin(), cp.end(), std::size_t{0});
    rng.shuffle(std::span<std::size_t>(cp));
    T Fc(F.shape());
    for (std::size_t b = 0; b < F.dim(0); ++b)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < H * W; ++i)
          Fc[(b * C + c) * H * W + i] = F[(b * C + cp[c]) * H * W + i];
    EXPECT_LE(max_abs_diff(spatial_attention(Fc, p), ms), 1e-14);
  }
}

TEST(Cbam, GraphMatchesPureForward) {
  Rng rng(7);
  const CbamConfig cfg{8, 4, 3};
  const auto p = random_params(cfg, rng);
  const auto F = oracle::random_tensor({2, 8, 3, 4}, rng);
  Graph<double> g;
  ag::CbamVars<double> v{g.constant(p.w0.value), g.constant(p.w1.value),
                         g.constant(p.conv.value), g.constant(p.conv_bias.value)};
  EXPECT_EQ(g.value(ag::cbam_apply(g, g.constant(F), v)), cbam_apply(F, p));
}

TEST(Cbam, PaperScalePooledVectorsHaveLength256) {
  const CbamConfig cfg{256, 8, 7};
  const auto p = P::init(cfg, 1);
  EXPECT_EQ(p.w0.value.shape(), (Shape{32, 256}));
  EXPECT_EQ(p.w1.value.shape(), (Shape{256, 32}));
  Rng rng(8);
  const auto F = oracle::random_tensor({1, 256, 2, 2}, rng);
  EXPECT_EQ(pool(F, {PoolMode::SpatialAvg}).size(), 256u);
  EXPECT_EQ(channel_attention(F, p).size(), 256u);
}

TEST(Cbam, GradCheckOnFiveSeeds) {
  const CbamConfig cfg{8, 4, 3};
  using Build = std::function<Graph<double>::Var(Graph<double>&, Graph<double>::Var,
                                                 const ag::CbamVars<double>&)>;
  const std::vector<std::pair<const char*, Build>> stages{
      {"channel", [](auto& g, auto F, const auto& v) { return ag::channel_attention(g, F, v); }},
      {"spatial", [](auto& g, auto F, const auto& v) { return ag::spatial_attention(g, F, v); }},
      {"cbam", [](auto& g, auto F, const auto& v) { return ag::cbam_apply(g, F, v); }},
  };
  for (const auto& [name, stage] : stages) {
    const GraphBuilder b = [stage](Graph<double>& g, const auto& v) {
      return stage(g, v[0], ag::CbamVars<double>{v[1], v[2], v[3], v[4]});
    };
    for (std::uint64_t seed : {1u, 2u, 3u, 4u, 5u}) {
      GradCheckOptions opt;
      opt.seed = seed;
      auto sample = [&](Rng& r) {
        const auto p = random_params(cfg, r);
        return std::vector<T>{oracle::random_tensor({2, 8, 4, 4}, r), p.w0.value,
                              p.w1.value, p.conv.value, p.conv_bias.value};
      };
      const auto res = grad_check_sampled(graph_forward(b), graph_backward(b), sample, opt);
      EXPECT_LT(res.max_rel_error, 1e-5) << name << " seed " << seed;
    }
  }
}
