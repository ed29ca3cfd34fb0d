#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dynfuse/attention.hpp"
#include "dynfuse/core/graph.hpp"
#include "dynfuse/core/hash.hpp"
#include "dynfuse/core/parallel.hpp"
#include "dynfuse/core/parameter.hpp"
#include "dynfuse/loss.hpp"
#include "dynfuse/rankpool.hpp"

// Pipeline variants for volume classification.
//
//   post_fusion_a    slices -> shared 2D backbone -> depth fusion -> CBAM -> head
//   post_fusion_b    chunked fusion of raw slices -> rescale -> backbone
//                    -> fusion over chunk features -> CBAM -> head
//   pre_fusion       fusion of raw slices -> rescale -> backbone -> CBAM -> head
//   conv3d_baseline  stacked 3D convolutions -> global average -> head
//
// The head is global average pooling followed by a single-logit dense layer.
namespace dynfuse {

enum class Variant { PostFusionA, PostFusionB, PreFusion, Conv3dBaseline };
enum class BackboneKind { ResidualSmall, PlainSmall };
enum class HeadKind { Fc, Svm };
enum class FusionKind { RankPool, MaxPool };
enum class WidthPreset { Desk, Paper };

inline const std::vector<std::pair<Variant, std::string>>& variant_names() {
  static const std::vector<std::pair<Variant, std::string>> v{
      {Variant::PostFusionA, "post_fusion_a"},
      {Variant::PostFusionB, "post_fusion_b"},
      {Variant::PreFusion, "pre_fusion"},
      {Variant::Conv3dBaseline, "conv3d_baseline"}};
  return v;
}

template <typename E>
std::string enum_name(E e, const std::vector<std::pair<E, std::string>>& table) {
  for (const auto& [k, n] : table)
    if (k == e) return n;
  return "?";
}

template <typename E>
E enum_parse(const std::string& s, const std::vector<std::pair<E, std::string>>& table,
             const char* what) {
  for (const auto& [k, n] : table)
    if (n == s) return k;
  std::string allowed;
  for (const auto& [k, n] : table) allowed += (allowed.empty() ? "" : ", ") + n;
  throw ConfigError(std::string("unknown ") + what + " '" + s + "' (expected one of: " +
                    allowed + ")");
}

inline const std::vector<std::pair<BackboneKind, std::string>>& backbone_names() {
  static const std::vector<std::pair<BackboneKind, std::string>> v{
      {BackboneKind::ResidualSmall, "residual_small"},
      {BackboneKind::PlainSmall, "plain_small"}};
  return v;
}
inline const std::vector<std::pair<HeadKind, std::string>>& head_names() {
  static const std::vector<std::pair<HeadKind, std::string>> v{{HeadKind::Fc, "fc"},
                                                               {HeadKind::Svm, "svm"}};
  return v;
}
inline const std::vector<std::pair<FusionKind, std::string>>& fusion_names() {
  static const std::vector<std::pair<FusionKind, std::string>> v{
      {FusionKind::RankPool, "rank_pool"}, {FusionKind::MaxPool, "max_pool"}};
  return v;
}
inline const std::vector<std::pair<WidthPreset, std::string>>& preset_names() {
  static const std::vector<std::pair<WidthPreset, std::string>> v{
      {WidthPreset::Desk, "desk"}, {WidthPreset::Paper, "paper"}};
  return v;
}

inline std::string to_string(Variant v) { return enum_name(v, variant_names()); }
inline std::string to_string(BackboneKind v) { return enum_name(v, backbone_names()); }
inline std::string to_string(HeadKind v) { return enum_name(v, head_names()); }
inline std::string to_string(FusionKind v) { return enum_name(v, fusion_names()); }
inline std::string to_string(WidthPreset v) { return enum_name(v, preset_names()); }

// Window size for a stride-2 downsampling step: 2 on even extents, 3 on odd
// ones, so every extent divides cleanly.
inline std::size_t down_window(std::size_t n) { return (n % 2 == 0) ? 2 : 3; }
inline std::size_t down_extent(std::size_t n) { return (n - down_window(n)) / 2 + 1; }

struct ModelConfig {
  Variant variant = Variant::PostFusionA;
  BackboneKind backbone = BackboneKind::ResidualSmall;
  bool use_cbam = true;
  HeadKind head = HeadKind::Fc;
  FusionKind fusion = FusionKind::RankPool;
  std::size_t chunk_k = 10;
  WidthPreset preset = WidthPreset::Desk;
  std::size_t input_channels = 1;
  std::array<std::size_t, 3> input_dims{32, 32, 32};  // D, H, W
  std::size_t cbam_reduction = 8;
  std::size_t spatial_kernel = 7;

  std::array<std::size_t, 3> widths() const {
    return preset == WidthPreset::Desk ? std::array<std::size_t, 3>{8, 16, 32}
                                       : std::array<std::size_t, 3>{64, 128, 256};
  }
  std::size_t feature_channels() const { return widths()[2]; }

  CbamConfig cbam() const { return {feature_channels(), cbam_reduction, spatial_kernel}; }

  void validate() const {
    if (chunk_k < 1) throw ConfigError("chunk_k must be >= 1");
    if (input_channels < 1) throw ConfigError("input_channels must be >= 1");
    const auto [D, H, W] = input_dims;
    if (D < 1 || H < 1 || W < 1) throw ConfigError("input_dims must be positive");
    if (variant == Variant::Conv3dBaseline) {
      if (use_cbam) throw ConfigError("conv3d_baseline does not support use_cbam");
      if (fusion != FusionKind::RankPool) {
        throw ConfigError("conv3d_baseline has no fusion stage; fusion must be rank_pool");
      }
      std::array<std::size_t, 3> n = input_dims;
      for (int step = 0; step < 2; ++step)
        for (auto& e : n) {
          if (e < 2) throw ConfigError("input_dims too small for conv3d_baseline");
          e = down_extent(e);
        }
    } else {
      if (H != W || H < 8) {
        throw ConfigError("2D variants need square slices of extent >= 8");
      }
      if (use_cbam) cbam().validate();
    }
  }
};

// Shape and initialisation fan-in of one named parameter.
struct ParamSpec {
  std::string name;
  Shape shape;
  std::size_t fan_in = 0;  // 0 = zero init
};

inline std::vector<ParamSpec> parameter_specs(const ModelConfig& cfg) {
  cfg.validate();
  std::vector<ParamSpec> out;
  const auto w = cfg.widths();
  auto conv2 = [&](const std::string& n, std::size_t in, std::size_t outc) {
    out.push_back({n + ".weight", {outc, in, 3, 3}, in * 9});
    out.push_back({n + ".bias", {outc}, 0});
  };
  if (cfg.variant == Variant::Conv3dBaseline) {
    auto conv3 = [&](const std::string& n, std::size_t in, std::size_t outc,
                     std::array<std::size_t, 3> k) {
      out.push_back({n + ".weight", {outc, in, k[0], k[1], k[2]}, in * k[0] * k[1] * k[2]});
      out.push_back({n + ".bias", {outc}, 0});
    };
    auto dims = cfg.input_dims;
    auto down = [&]() {
      std::array<std::size_t, 3> k{};
      for (int i = 0; i < 3; ++i) {
        k[i] = down_window(dims[i]);
        dims[i] = down_extent(dims[i]);
      }
      return k;
    };
    conv3("baseline.conv1", cfg.input_channels, w[0], {3, 3, 3});
    conv3("baseline.down1", w[0], w[1], down());
    conv3("baseline.conv2", w[1], w[1], {3, 3, 3});
    conv3("baseline.down2", w[1], w[2], down());
    conv3("baseline.conv3", w[2], w[2], {3, 3, 3});
  } else {
    conv2("backbone.stem", cfg.input_channels, w[0]);
    conv2("backbone.block1.conv1", w[0], w[0]);
    conv2("backbone.block1.conv2", w[0], w[0]);
    conv2("backbone.block2.conv1", w[0], w[1]);
    conv2("backbone.block2.conv2", w[1], w[1]);
    conv2("backbone.block3.conv1", w[1], w[2]);
    conv2("backbone.block3.conv2", w[2], w[2]);
    if (cfg.use_cbam) {
      const auto c = cfg.cbam();
      const std::size_t k = c.spatial_kernel;
      out.push_back({"cbam.mlp.w0", {c.hidden(), c.channels}, c.channels});
      out.push_back({"cbam.mlp.w1", {c.channels, c.hidden()}, c.hidden()});
      out.push_back({"cbam.spatial.weight", {1, 2, k, k}, 2 * k * k});
      out.push_back({"cbam.spatial.bias", {1}, 0});
    }
  }
  const std::size_t C = cfg.feature_channels();
  out.push_back({"head.fc.weight", {1, C}, C});
  out.push_back({"head.fc.bias", {1}, 0});
  if (cfg.head == HeadKind::Svm) {
    out.push_back({"head.svm.weight", {1, C}, 0});
    out.push_back({"head.svm.bias", {1}, 0});
  }
  return out;
}

inline std::size_t parameter_count(const ModelConfig& cfg) {
  std::size_t n = 0;
  for (const auto& p : parameter_specs(cfg)) n += numel(p.shape);
  return n;
}

// Parameters updated by gradient descent (the SVM head is fitted separately).
inline bool is_trainable(const std::string& name) {
  return name.rfind("head.svm.", 0) != 0;
}

template <typename S>
class ParamStore {
 public:
  void add(std::string name, Tensor<S> value) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name " + name);
    index_.emplace(name, items_.size());
    items_.emplace_back(std::move(name), std::move(value));
  }
  std::size_t size() const noexcept { return items_.size(); }
  Parameter<S>& operator[](std::size_t i) { return items_[i]; }
  const Parameter<S>& operator[](std::size_t i) const { return items_[i]; }
  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  std::size_t index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("no parameter named " + name);
    return it->second;
  }
  Parameter<S>& get(const std::string& name) { return items_[index_of(name)]; }
  const Parameter<S>& get(const std::string& name) const { return items_[index_of(name)]; }
  std::vector<Parameter<S>>& items() noexcept { return items_; }
  const std::vector<Parameter<S>>& items() const noexcept { return items_; }
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : items_) n += p.value.size();
    return n;
  }

 private:
  std::vector<Parameter<S>> items_;
  std::map<std::string, std::size_t> index_;
};

template <typename S>
struct ModelInstance {
  ModelConfig config;
  std::uint64_t seed = 0;
  ParamStore<S> params;
};

// Each parameter draws from its own stream keyed by its name, so adding or
// removing a stage leaves the other initial values unchanged.
template <typename S>
ModelInstance<S> build_model(const ModelConfig& cfg, std::uint64_t seed) {
  ModelInstance<S> m{cfg, seed, {}};
  for (const auto& spec : parameter_specs(cfg)) {
    Tensor<S> v(spec.shape);
    if (spec.fan_in > 0) {
      Rng rng(derive_seed(seed, fnv1a64(spec.name)));
      v = he_uniform<S>(spec.shape, spec.fan_in, rng);
    }
    m.params.add(spec.name, std::move(v));
  }
  return m;
}

// Graph handles for every parameter of a model.
template <typename S>
struct BoundParams {
  const ParamStore<S>* store = nullptr;
  std::vector<typename Graph<S>::Var> vars;

  typename Graph<S>::Var operator()(const std::string& name) const {
    return vars.at(store->index_of(name));
  }
};

template <typename S>
BoundParams<S> bind_params(Graph<S>& g, const ParamStore<S>& store, bool trainable) {
  BoundParams<S> b{&store, {}};
  b.vars.reserve(store.size());
  for (const auto& p : store.items()) {
    b.vars.push_back(trainable && is_trainable(p.name) ? g.variable(p.value)
                                                       : g.constant(p.value));
  }
  return b;
}

namespace ag {

template <typename S>
Var<S> downsample2d(Graph<S>& g, Var<S> x) {
  const std::size_t n = g.value(x).dim(2);
  return pool(g, x, PoolSpec{PoolMode::WindowMax, down_window(n), 2});
}

// conv-relu-conv, plus a parameter-free shortcut (identity, zero-padded along
// channels when the width grows) on the residual backbone.
template <typename S>
Var<S> backbone_block(Graph<S>& g, Var<S> x, const BoundParams<S>& p,
                      const std::string& name, bool residual) {
  auto h = relu(g, conv2d(g, x, p(name + ".conv1.weight"), p(name + ".conv1.bias"), {1, 1}));
  h = conv2d(g, h, p(name + ".conv2.weight"), p(name + ".conv2.bias"), {1, 1});
  if (residual) {
    Var<S> skip = x;
    const Shape xs = g.value(x).shape();
    const std::size_t outc = g.value(h).dim(1);
    if (xs[1] < outc) {
      auto zeros = g.constant(Tensor<S>({xs[0], outc - xs[1], xs[2], xs[3]}));
      skip = concat<S>(g, {x, zeros}, 1);
    }
    h = add(g, h, skip);
  }
  return relu(g, h);
}

// [N, Cin, H, W] -> [N, C, H/8, W/8] (approximately; odd extents use 3-windows)
template <typename S>
Var<S> backbone(Graph<S>& g, Var<S> x, const BoundParams<S>& p, BackboneKind kind) {
  const bool residual = kind == BackboneKind::ResidualSmall;
  auto h = relu(g, conv2d(g, x, p("backbone.stem.weight"), p("backbone.stem.bias"), {1, 1}));
  h = downsample2d(g, h);
  h = backbone_block(g, h, p, "backbone.block1", residual);
  h = downsample2d(g, h);
  h = backbone_block(g, h, p, "backbone.block2", residual);
  h = downsample2d(g, h);
  return backbone_block(g, h, p, "backbone.block3", residual);
}

template <typename S>
Var<S> conv3d_stack(Graph<S>& g, Var<S> x, const BoundParams<S>& p) {
  auto layer = [&](Var<S> h, const std::string& n, ConvOptions opt) {
    return relu(g, conv3d(g, h, p(n + ".weight"), p(n + ".bias"), opt));
  };
  auto h = layer(x, "baseline.conv1", {1, 1});
  h = layer(h, "baseline.down1", {2, 0});
  h = layer(h, "baseline.conv2", {1, 1});
  h = layer(h, "baseline.down2", {2, 0});
  return layer(h, "baseline.conv3", {1, 1});
}

template <typename S>
Var<S> fuse_depth(Graph<S>& g, Var<S> x, FusionKind kind) {
  return kind == FusionKind::RankPool ? approx_rank_pool(g, x) : maxpool_fuse(g, x);
}

// Pooled penultimate features [1, C] of one sample [Cin, D, H, W].
template <typename S>
Var<S> sample_features(Graph<S>& g, Var<S> sample, const BoundParams<S>& p,
                       const ModelConfig& cfg) {
  const Shape s = g.value(sample).shape();
  const std::size_t C = cfg.feature_channels();
  Var<S> fmap;
  if (cfg.variant == Variant::Conv3dBaseline) {
    auto x = reshape(g, sample, {1, s[0], s[1], s[2], s[3]});
    auto h = conv3d_stack(g, x, p);
    const Shape hs = g.value(h).shape();
    fmap = reshape(g, h, {1, C, hs[2] * hs[3], hs[4]});
  } else {
    auto slices = transpose01(g, sample);  // [D, Cin, H, W]
    Var<S> fused;
    if (cfg.variant == Variant::PostFusionA) {
      fused = fuse_depth(g, backbone(g, slices, p, cfg.backbone), cfg.fusion);
    } else if (cfg.variant == Variant::PostFusionB) {
      // the preliminary per-chunk fusion is always rank pooling
      auto chunks = minmax_rescale(g, chunked_fuse(g, slices, cfg.chunk_k));
      fused = fuse_depth(g, backbone(g, chunks, p, cfg.backbone), cfg.fusion);
    } else {
      auto image = minmax_rescale(g, fuse_depth(g, slices, cfg.fusion));
      fused = backbone(g, image, p, cfg.backbone);
    }
    if (cfg.use_cbam) {
      fused = cbam_apply(g, fused, CbamVars<S>{p("cbam.mlp.w0"), p("cbam.mlp.w1"),
                                               p("cbam.spatial.weight"),
                                               p("cbam.spatial.bias")});
    }
    fmap = fused;
  }
  return reshape(g, pool(g, fmap, PoolSpec{PoolMode::SpatialAvg}), {1, C});
}

// Single logit [1, 1] of one sample through the given head.
template <typename S>
Var<S> sample_logit(Graph<S>& g, Var<S> sample, const BoundParams<S>& p,
                    const ModelConfig& cfg, HeadKind head, Var<S>* features = nullptr) {
  auto f = sample_features(g, sample, p, cfg);
  if (features) *features = f;
  if (head == HeadKind::Svm) {
    return dense(g, f, p("head.svm.weight"), p("head.svm.bias"));
  }
  return dense(g, f, p("head.fc.weight"), p("head.fc.bias"));
}

}  // namespace ag

template <typename S>
void check_batch(const ModelConfig& cfg, const Tensor<S>& batch) {
  const auto [D, H, W] = cfg.input_dims;
  require_rank(batch, 5, "model input");
  const Shape want{batch.dim(0), cfg.input_channels, D, H, W};
  if (batch.shape() != want) {
    throw ShapeError("model input " + to_string(batch.shape()) +
                     " does not match configured [B," +
                     std::to_string(cfg.input_channels) + "," + std::to_string(D) +
                     "," + std::to_string(H) + "," + std::to_string(W) + "]");
  }
}

template <typename S>
Tensor<S> sample_of(const Tensor<S>& batch, std::size_t b) {
  Shape s(batch.shape().begin() + 1, batch.shape().end());
  const std::size_t n = numel(s);
  return Tensor<S>(std::move(s), std::vector<S>(batch.ptr() + b * n, batch.ptr() + (b + 1) * n));
}

struct SampleOutput {
  double logit = 0.0;
  std::vector<double> features;
};

// Inference for every sample of [B, Cin, D, H, W]; samples run in parallel.
template <typename S>
std::vector<SampleOutput> run_samples(const ModelInstance<S>& m, const Tensor<S>& batch,
                                      std::size_t threads = 1) {
  check_batch(m.config, batch);
  std::vector<SampleOutput> out(batch.dim(0));
  parallel_for(out.size(), threads, [&](std::size_t b) {
    Graph<S> g;
    const auto p = bind_params(g, m.params, false);
    typename Graph<S>::Var f;
    const auto z = ag::sample_logit(g, g.constant(sample_of(batch, b)), p, m.config,
                                    m.config.head, &f);
    out[b].logit = static_cast<double>(g.value(z)[0]);
    out[b].features.assign(g.value(f).vec().begin(), g.value(f).vec().end());
  });
  return out;
}

template <typename S>
Tensor<S> forward_logits(const ModelInstance<S>& m, const Tensor<S>& batch,
                         std::size_t threads = 1) {
  const auto outs = run_samples(m, batch, threads);
  Tensor<S> z({outs.size()});
  for (std::size_t i = 0; i < outs.size(); ++i) z[i] = static_cast<S>(outs[i].logit);
  return z;
}

// Probabilities [B] in (0, 1).
template <typename S>
Tensor<S> forward(const ModelInstance<S>& m, const Tensor<S>& batch, std::size_t threads = 1) {
  return sigmoid(forward_logits(m, batch, threads));
}

// Pooled penultimate activations [B, C].
template <typename S>
Tensor<double> penultimate_features(const ModelInstance<S>& m, const Tensor<S>& batch,
                                    std::size_t threads = 1) {
  const auto outs = run_samples(m, batch, threads);
  const std::size_t C = m.config.feature_channels();
  Tensor<double> f({outs.size(), C});
  for (std::size_t i = 0; i < outs.size(); ++i)
    for (std::size_t c = 0; c < C; ++c) f[i * C + c] = outs[i].features[c];
  return f;
}

struct BatchLoss {
  double loss = 0.0;  // mean clamped BCE over the batch
  std::vector<double> probs;
};

// Mean BCE over a batch and its gradient through the FC head, written into
// every trainable parameter's grad (overwriting). Each sample's gradient comes from the
// logit form d/dz = sigmoid(z) - label, scaled by 1/B; per-sample results
// are summed in index order, so the outcome does not depend on `threads`.
template <typename S>
BatchLoss loss_and_grad(ModelInstance<S>& m, const Tensor<S>& batch,
                        const std::vector<int>& labels, std::size_t threads = 1) {
  check_batch(m.config, batch);
  const std::size_t B = batch.dim(0);
  if (labels.size() != B) throw ShapeError("label count does not match batch size");
  for (int l : labels) check_label(l);
  std::vector<std::vector<Tensor<S>>> grads(B);
  std::vector<double> z(B);
  parallel_for(B, threads, [&](std::size_t b) {
    Graph<S> g;
    const auto p = bind_params(g, m.params, true);
    const auto logit =
        ag::sample_logit(g, g.constant(sample_of(batch, b)), p, m.config, HeadKind::Fc);
    z[b] = static_cast<double>(g.value(logit)[0]);
    const double dz = (sigmoid(z[b]) - labels[b]) / static_cast<double>(B);
    g.backward(logit, Tensor<S>({1, 1}, {static_cast<S>(dz)}));
    grads[b].reserve(p.vars.size());
    for (std::size_t i = 0; i < p.vars.size(); ++i) grads[b].push_back(g.grad(p.vars[i]));
  });
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    auto& prm = m.params[i];
    prm.zero_grad();
    for (std::size_t b = 0; b < B; ++b) {
      const auto& gb = grads[b][i];
      if (gb.empty()) continue;
      for (std::size_t k = 0; k < gb.size(); ++k) prm.grad[k] += gb[k];
    }
  }
  BatchLoss out;
  for (std::size_t b = 0; b < B; ++b) {
    const double p = sigmoid(z[b]);
    out.probs.push_back(p);
    out.loss += bce_loss(labels[b], p) / static_cast<double>(B);
  }
  return out;
}

}  // namespace dynfuse
