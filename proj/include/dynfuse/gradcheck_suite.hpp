#pragma once

#include <array>
#include <cstdint>
#include <exception>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "dynfuse/attention.hpp"
#include "dynfuse/core/grad_check.hpp"
#include "dynfuse/core/parameter.hpp"
#include "dynfuse/model.hpp"
#include "dynfuse/rankpool.hpp"

// Registry of finite-difference checks: every graph op on small random
// inputs, and every pipeline variant end to end (all parameters plus the
// input volume, through the sigmoid output).
namespace dynfuse {

struct GradCase {
  std::string name;
  std::string kind;  // "op" or "pipeline"
  double threshold = 1e-5;
  GraphBuilder build;
  std::function<std::vector<Tensor<double>>(Rng&)> sample;
  std::size_t max_coords = 0;
};

struct GradCaseResult {
  std::string name;
  std::string kind;
  std::uint64_t seed = 0;
  double threshold = 0.0;
  double max_rel_error = 0.0;
  std::size_t coords = 0;
  bool passed = false;
  std::string error;  // set when the check itself threw
};

// Names under which graph ops are recorded (valid fault-injection targets).
inline const std::vector<std::string>& recorded_op_names() {
  static const std::vector<std::string> v{
      "conv2d", "conv3d",    "pooling", "dense",      "relu",      "sigmoid",
      "add",    "mul",       "scale",   "reshape",    "slice",     "concat",
      "transpose01", "approx_rank_pool", "maxpool_fuse", "minmax_rescale"};
  return v;
}

namespace detail {

using Inputs = std::vector<Tensor<double>>;

inline std::function<Inputs(Rng&)> uniform_inputs(std::vector<Shape> shapes) {
  return [shapes](Rng& r) {
    Inputs in;
    for (const auto& s : shapes) in.push_back(uniform_tensor<double>(s, -1.0, 1.0, r));
    return in;
  };
}

}  // namespace detail

inline std::vector<GradCase> op_grad_cases() {
  using G = Graph<double>;
  using detail::uniform_inputs;
  std::vector<GradCase> c;
  auto op = [&](std::string name, GraphBuilder b, std::vector<Shape> shapes) {
    c.push_back({std::move(name), "op", 1e-5, std::move(b), uniform_inputs(std::move(shapes))});
  };
  op("conv2d_pad1",
     [](G& g, const auto& v) { return ag::conv2d(g, v[0], v[1], v[2], {1, 1}); },
     {{1, 2, 5, 5}, {3, 2, 3, 3}, {3}});
  op("conv2d_stride2",
     [](G& g, const auto& v) { return ag::conv2d(g, v[0], v[1], v[2], {2, 1}); },
     {{2, 2, 5, 5}, {2, 2, 3, 3}, {2}});
  op("conv3d",
     [](G& g, const auto& v) { return ag::conv3d(g, v[0], v[1], v[2], {1, 1}); },
     {{1, 2, 3, 4, 4}, {2, 2, 3, 3, 3}, {2}});
  op("conv3d_stride2_anisotropic",
     [](G& g, const auto& v) { return ag::conv3d(g, v[0], v[1], v[2], {2, 0}); },
     {{1, 1, 5, 4, 5}, {2, 1, 3, 2, 3}, {2}});
  const std::pair<PoolMode, const char*> modes[] = {{PoolMode::SpatialAvg, "pool_spatial_avg"},
                                                     {PoolMode::SpatialMax, "pool_spatial_max"},
                                                     {PoolMode::ChannelAvg, "pool_channel_avg"},
                                                     {PoolMode::ChannelMax, "pool_channel_max"}};
  for (const auto& [mode, name] : modes) {
    op(name, [mode](G& g, const auto& v) { return ag::pool(g, v[0], PoolSpec{mode}); },
       {{2, 3, 3, 4}});
  }
  op("pool_window_max",
     [](G& g, const auto& v) { return ag::pool(g, v[0], PoolSpec{PoolMode::WindowMax, 3, 2}); },
     {{1, 2, 5, 7}});
  op("dense", [](G& g, const auto& v) { return ag::dense(g, v[0], v[1], v[2]); },
     {{3, 4}, {2, 4}, {2}});
  op("relu", [](G& g, const auto& v) { return ag::relu(g, v[0]); }, {{3, 5}});
  op("sigmoid", [](G& g, const auto& v) { return ag::sigmoid(g, v[0]); }, {{3, 5}});
  op("broadcast_add_mul",
     [](G& g, const auto& v) { return ag::mul(g, ag::add(g, v[0], v[1]), v[1]); },
     {{2, 3, 4}, {3, 1}});
  op("slice_concat_transpose_reshape_scale",
     [](G& g, const auto& v) {
       auto a = ag::slice(g, v[0], 1, 0, 2);
       auto b = ag::slice(g, v[0], 1, 1, 4);
       auto cc = ag::concat<double>(g, {b, a}, 1);
       return ag::scale(g, ag::transpose01(g, ag::reshape(g, cc, {5, 4})), 1.5);
     },
     {{2, 4, 2}});
  op("approx_rank_pool", [](G& g, const auto& v) { return ag::approx_rank_pool(g, v[0]); },
     {{6, 2, 3, 3}});
  op("maxpool_fuse", [](G& g, const auto& v) { return ag::maxpool_fuse(g, v[0]); },
     {{4, 2, 3}});
  op("chunked_fuse", [](G& g, const auto& v) { return ag::chunked_fuse(g, v[0], 3); },
     {{7, 2, 2}});
  op("minmax_rescale", [](G& g, const auto& v) { return ag::minmax_rescale(g, v[0]); },
     {{3, 2, 4}});

  const CbamConfig cfg{8, 4, 3};
  using Stage = std::function<G::Var(G&, G::Var, const ag::CbamVars<double>&)>;
  const std::pair<const char*, Stage> stages[] = {
      {"cbam_channel_gate",
       [](G& g, G::Var F, const auto& p) { return ag::channel_attention(g, F, p); }},
      {"cbam_spatial_gate",
       [](G& g, G::Var F, const auto& p) { return ag::spatial_attention(g, F, p); }},
      {"cbam_block", [](G& g, G::Var F, const auto& p) { return ag::cbam_apply(g, F, p); }}};
  for (const auto& [name, stage] : stages) {
    op(name,
       [stage](G& g, const auto& v) {
         return stage(g, v[0], ag::CbamVars<double>{v[1], v[2], v[3], v[4]});
       },
       {{2, 8, 4, 4},
        {cfg.hidden(), cfg.channels},
        {cfg.channels, cfg.hidden()},
        {1, 2, cfg.spatial_kernel, cfg.spatial_kernel},
        {1}});
  }
  return c;
}

// Every row of the model/ablation table at a small input size.
inline std::vector<std::pair<std::string, ModelConfig>> pipeline_variants(
    std::array<std::size_t, 3> dims = {6, 8, 8}, std::size_t chunk_k = 4) {
  auto base = [&](Variant v) {
    ModelConfig c;
    c.variant = v;
    c.input_dims = dims;
    c.chunk_k = chunk_k;
    c.use_cbam = v != Variant::Conv3dBaseline;
    return c;
  };
  std::vector<std::pair<std::string, ModelConfig>> rows;
  rows.emplace_back("conv3d_baseline", base(Variant::Conv3dBaseline));
  rows.emplace_back("pre_fusion", base(Variant::PreFusion));
  rows.emplace_back("post_fusion_a", base(Variant::PostFusionA));
  rows.emplace_back("post_fusion_b", base(Variant::PostFusionB));
  auto svm = base(Variant::PostFusionA);
  svm.head = HeadKind::Svm;
  rows.emplace_back("post_fusion_svm_head", svm);
  auto no_cbam = base(Variant::PostFusionA);
  no_cbam.use_cbam = false;
  rows.emplace_back("post_fusion_no_cbam", no_cbam);
  auto maxp = base(Variant::PostFusionA);
  maxp.fusion = FusionKind::MaxPool;
  rows.emplace_back("post_fusion_maxpool", maxp);
  auto plain = base(Variant::PostFusionA);
  plain.backbone = BackboneKind::PlainSmall;
  rows.emplace_back("post_fusion_plain_backbone", plain);
  return rows;
}

// Inputs: every parameter (in store order) then a batch of two volumes.
inline GradCase pipeline_grad_case(const std::string& name, const ModelConfig& cfg,
                                   std::size_t max_coords = 6) {
  const auto proto = std::make_shared<ModelInstance<double>>(build_model<double>(cfg, 0));
  const std::size_t P = proto->params.size();
  GraphBuilder build = [cfg, proto, P](Graph<double>& g, const std::vector<Graph<double>::Var>& v) {
    BoundParams<double> bp{&proto->params, {}};
    for (std::size_t i = 0; i < P; ++i) bp.vars.push_back(v[i]);
    const Shape xb = g.value(v[P]).shape();
    std::vector<Graph<double>::Var> logits;
    for (std::size_t b = 0; b < xb[0]; ++b) {
      auto s = ag::reshape(g, ag::slice(g, v[P], 0, b, b + 1), Shape(xb.begin() + 1, xb.end()));
      logits.push_back(ag::sample_logit(g, s, bp, cfg, cfg.head));
    }
    return ag::sigmoid(g, ag::concat<double>(g, logits, 0));
  };
  auto sample = [cfg](Rng& r) {
    const auto m = build_model<double>(cfg, r.next_u64());
    std::vector<Tensor<double>> in;
    for (const auto& p : m.params.items()) {
      Tensor<double> v = p.value;
      // non-zero biases and SVM weights so every path carries gradient
      const bool svm = p.name.rfind("head.svm.", 0) == 0;
      if (svm || p.name.find("bias") != std::string::npos)
        for (auto& e : v.data()) e = r.uniform(svm ? -1.0 : -0.1, svm ? 1.0 : 0.1);
      in.push_back(std::move(v));
    }
    const auto [D, H, W] = cfg.input_dims;
    in.push_back(uniform_tensor<double>({2, cfg.input_channels, D, H, W}, 0.0, 1.0, r));
    return in;
  };
  return {name, "pipeline", 1e-4, std::move(build), std::move(sample), max_coords};
}

inline std::vector<GradCase> pipeline_grad_cases() {
  std::vector<GradCase> out;
  for (const auto& [name, cfg] : pipeline_variants()) out.push_back(pipeline_grad_case(name, cfg));
  return out;
}

inline std::vector<std::uint64_t> default_grad_seeds() { return {1, 2, 3, 4, 5}; }

inline GradCaseResult run_grad_case(const GradCase& c, std::uint64_t seed,
                                    const std::string& fault_op = {}) {
  GradCaseResult r;
  r.name = c.name;
  r.kind = c.kind;
  r.seed = seed;
  r.threshold = c.threshold;
  GradCheckOptions opt;
  opt.seed = seed;
  opt.max_coords = c.max_coords;
  try {
    const auto res =
        grad_check_sampled(graph_forward(c.build), graph_backward(c.build, fault_op), c.sample, opt);
    r.max_rel_error = res.max_rel_error;
    r.coords = res.coords_checked;
    r.passed = res.max_rel_error < c.threshold && res.coords_checked > 0;
  } catch (const std::exception& e) {
    r.error = e.what();
    r.passed = false;
  }
  return r;
}

}  // namespace dynfuse
