#pragma once

#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "dynfuse/core/hash.hpp"
#include "dynfuse/core/parameter.hpp"
#include "dynfuse/core/rng.hpp"
#include "dynfuse/data.hpp"
#include "dynfuse/json_config.hpp"
#include "dynfuse/loss.hpp"
#include "dynfuse/model.hpp"
#include "dynfuse/svm.hpp"

namespace dynfuse {

// ---------------------------------------------------------------------------
// Adam with bias correction; moments are kept per parameter.

template <typename S>
struct AdamState {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t t = 0;
  std::vector<Tensor<S>> m, v;

  AdamState() = default;
  explicit AdamState(double learning_rate) : lr(learning_rate) {}
};

template <typename S>
void adam_step(std::span<Parameter<S>> params, AdamState<S>& st) {
  if (st.m.empty()) {
    for (const auto& p : params) {
      st.m.emplace_back(p.value.shape());
      st.v.emplace_back(p.value.shape());
    }
  }
  if (st.m.size() != params.size()) throw ShapeError("adam: state/parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params[i];
    if (p.grad.shape() != p.value.shape() || st.m[i].shape() != p.value.shape()) {
      throw ShapeError("adam: shape mismatch for parameter " + p.name);
    }
    for (S g : p.grad.data())
      if (!std::isfinite(static_cast<double>(g)))
        throw NumericError("adam: non-finite gradient in parameter " + p.name);
  }
  ++st.t;
  const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.t));
  const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    S* m = st.m[i].ptr();
    S* v = st.v[i].ptr();
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      const double g = static_cast<double>(p.grad[k]);
      const double mk = st.beta1 * static_cast<double>(m[k]) + (1.0 - st.beta1) * g;
      const double vk = st.beta2 * static_cast<double>(v[k]) + (1.0 - st.beta2) * g * g;
      m[k] = static_cast<S>(mk);
      v[k] = static_cast<S>(vk);
      const double step = st.lr * (mk / c1) / (std::sqrt(vk / c2) + st.eps);
      p.value[k] = static_cast<S>(static_cast<double>(p.value[k]) - step);
    }
  }
}

template <typename S>
void adam_step(ParamStore<S>& store, AdamState<S>& st) {
  adam_step(std::span<Parameter<S>>(store.items()), st);
}

// ---------------------------------------------------------------------------
// Checkpoints: `<stem>.json` manifest plus `<stem>.bin` blob of every
// parameter's values, little-endian, in store order.

class CheckpointHashError : public IoError {
 public:
  using IoError::IoError;
};
class CheckpointShapeError : public IoError {
 public:
  using IoError::IoError;
};
class CheckpointTruncatedError : public IoError {
 public:
  using IoError::IoError;
};

struct CheckpointInfo {
  std::size_t epoch = 0;
  Json metrics = Json::object();
};

template <typename S>
constexpr const char* dtype_tag() {
  return sizeof(S) == 8 ? "f64le" : "f32le";
}

namespace detail {

template <typename S>
void put_scalar_le(std::string& out, S v) {
  using U = std::conditional_t<sizeof(S) == 8, std::uint64_t, std::uint32_t>;
  const U u = std::bit_cast<U>(v);
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xffu));
}

template <typename S>
S get_scalar_le(const char* p) {
  using U = std::conditional_t<sizeof(S) == 8, std::uint64_t, std::uint32_t>;
  U u = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) u |= U(static_cast<unsigned char>(p[i])) << (8 * i);
  return std::bit_cast<S>(u);
}

inline std::uint64_t fnv_of(const std::string& bytes) {
  return fnv1a64(std::span<const unsigned char>(
      reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size()));
}

}  // namespace detail

inline fs::path checkpoint_blob_path(const fs::path& manifest) {
  auto p = manifest;
  p.replace_extension(".bin");
  return p;
}

template <typename S>
void checkpoint_save(const fs::path& path, const ModelInstance<S>& m,
                     const CheckpointInfo& info = {}) {
  std::string blob;
  Json index = Json::array();
  for (const auto& p : m.params.items()) {
    const std::size_t off = blob.size();
    for (S v : p.value.data()) detail::put_scalar_le(blob, v);
    index.push_back({{"name", p.name},
                     {"shape", p.value.shape()},
                     {"offset", off},
                     {"bytes", blob.size() - off}});
  }
  const auto bin = checkpoint_blob_path(path);
  Json man = {{"format", "dynfuse-checkpoint"},
              {"version", 1},
              {"config", to_json(m.config)},
              {"seed", m.seed},
              {"epoch", info.epoch},
              {"metrics", info.metrics},
              {"dtype", dtype_tag<S>()},
              {"blob", bin.filename().string()},
              {"blob_bytes", blob.size()},
              {"blob_fnv1a64", hex64(detail::fnv_of(blob))},
              {"params", index}};
  detail::write_bytes(bin, blob);
  detail::write_bytes(path, man.dump(2) + "\n");
}

// Loads into scalar type S; a blob stored at the other width is converted.
template <typename S>
ModelInstance<S> checkpoint_load(const fs::path& path, CheckpointInfo* info = nullptr) {
  Json man;
  try {
    man = Json::parse(detail::read_bytes(path));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed checkpoint manifest " + path.string() + ": " + e.what());
  }
  try {
    if (man.at("format").get<std::string>() != "dynfuse-checkpoint")
      throw IoError(path.string() + " is not a checkpoint manifest");
    const auto cfg = model_config_from_json(man.at("config"), "checkpoint.config");
    const auto dtype = man.at("dtype").get<std::string>();
    if (dtype != "f64le" && dtype != "f32le") throw IoError("unsupported checkpoint dtype " + dtype);
    const std::size_t width = dtype == "f64le" ? 8 : 4;
    const auto bin = path.parent_path() / man.at("blob").get<std::string>();
    const auto blob = detail::read_bytes(bin);
    const auto want_bytes = man.at("blob_bytes").get<std::size_t>();
    if (blob.size() != want_bytes) {
      throw CheckpointTruncatedError("checkpoint blob " + bin.string() + " has " +
                                     std::to_string(blob.size()) + " bytes, manifest records " +
                                     std::to_string(want_bytes));
    }
    if (hex64(detail::fnv_of(blob)) != man.at("blob_fnv1a64").get<std::string>()) {
      throw CheckpointHashError("checkpoint blob " + bin.string() +
                                " does not match the manifest hash");
    }
    ModelInstance<S> m{cfg, man.at("seed").get<std::uint64_t>(), {}};
    const auto specs = parameter_specs(cfg);
    const auto& index = man.at("params");
    if (index.size() != specs.size()) {
      throw CheckpointShapeError("checkpoint lists " + std::to_string(index.size()) +
                                 " parameters, configuration needs " +
                                 std::to_string(specs.size()));
    }
    for (std::size_t i = 0; i < specs.size(); ++i) {
      const auto& e = index[i];
      const auto name = e.at("name").get<std::string>();
      const auto shape = e.at("shape").get<Shape>();
      if (name != specs[i].name || shape != specs[i].shape) {
        throw CheckpointShapeError("checkpoint parameter " + name + " " + to_string(shape) +
                                   " does not match expected " + specs[i].name + " " +
                                   to_string(specs[i].shape));
      }
      const auto off = e.at("offset").get<std::size_t>();
      const auto bytes = e.at("bytes").get<std::size_t>();
      const std::size_t n = numel(shape);
      if (bytes != n * width) {
        throw CheckpointShapeError("checkpoint parameter " + name + " byte length " +
                                   std::to_string(bytes) + " does not match shape " +
                                   to_string(shape));
      }
      if (off + bytes > blob.size()) {
        throw CheckpointTruncatedError("checkpoint parameter " + name + " extends past blob end");
      }
      Tensor<S> t(shape);
      for (std::size_t k = 0; k < n; ++k) {
        const char* p = blob.data() + off + k * width;
        t[k] = width == 8 ? static_cast<S>(detail::get_scalar_le<double>(p))
                          : static_cast<S>(detail::get_scalar_le<float>(p));
      }
      m.params.add(name, std::move(t));
    }
    if (info) {
      info->epoch = man.at("epoch").get<std::size_t>();
      info->metrics = man.at("metrics");
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("bad checkpoint manifest " + path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Training.

enum class Precision { F64, F32 };

inline const std::vector<std::pair<Precision, std::string>>& precision_names() {
  static const std::vector<std::pair<Precision, std::string>> v{{Precision::F64, "f64"},
                                                                {Precision::F32, "f32"}};
  return v;
}

struct TrainConfig {
  std::size_t epochs = 150;
  std::size_t batch_size = 16;
  double lr = 1e-4;
  std::uint64_t seed = 0;
  Precision precision = Precision::F64;
  ModelConfig model;
  SvmConfig svm;
  std::size_t threads = 0;  // 0 = hardware

  void validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be a positive number");
    model.validate();
    svm.validate();
  }
};

struct CurveRow {
  std::size_t epoch;
  double train_loss;
  double eval_loss;
};

inline std::string curve_csv(const std::vector<CurveRow>& rows) {
  std::string s = "epoch,train_loss,eval_loss\n";
  char buf[96];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g\n", r.epoch, r.train_loss, r.eval_loss);
    s += buf;
  }
  return s;
}

template <typename S>
struct TrainResult {
  ModelInstance<S> final_model;
  ModelInstance<S> best_model;
  std::size_t best_epoch = 0;
  std::vector<CurveRow> curve;
};

template <typename S>
Tensor<S> gather_batch(const Tensor<S>& x, std::span<const std::size_t> idx) {
  Shape s = x.shape();
  const std::size_t n = numel(Shape(s.begin() + 1, s.end()));
  s[0] = idx.size();
  std::vector<S> flat;
  flat.reserve(idx.size() * n);
  for (std::size_t i : idx) flat.insert(flat.end(), x.ptr() + i * n, x.ptr() + (i + 1) * n);
  return Tensor<S>(std::move(s), std::move(flat));
}

// Mean clamped BCE of the model's probabilities over a dataset.
template <typename S>
double dataset_loss(const ModelInstance<S>& m, const Dataset<S>& ds, std::size_t threads) {
  const auto p = forward(m, ds.x, threads);
  double loss = 0.0;
  for (std::size_t i = 0; i < ds.size(); ++i)
    loss += bce_loss(ds.labels[i], static_cast<double>(p[i]));
  return loss / static_cast<double>(ds.size());
}

inline void check_trainable_labels(const std::vector<int>& labels, const char* what) {
  if (labels.empty()) throw ValueError(std::string(what) + " dataset is empty");
  int pos = 0;
  for (int l : labels) {
    check_label(l);
    pos += l;
  }
  if (pos == 0 || pos == static_cast<int>(labels.size())) {
    throw ValueError(std::string(what) + " dataset contains a single class");
  }
}

// Fits the linear SVM head on the model's pooled features (SVM-head models only).
template <typename S>
void fit_svm_head(ModelInstance<S>& m, const Dataset<S>& ds, const SvmConfig& cfg,
                  std::size_t threads) {
  if (m.config.head != HeadKind::Svm) return;
  const auto feats = penultimate_features(m, ds.x, threads);
  const auto svm = svm_fit(feats, ds.labels, cfg);
  auto& w = m.params.get("head.svm.weight").value;
  for (std::size_t i = 0; i < svm.w.size(); ++i) w[i] = static_cast<S>(svm.w[i]);
  m.params.get("head.svm.bias").value[0] = static_cast<S>(svm.b);
}

// One training run's mutable state: parameters, Adam moments, epoch counter.
// Each epoch shuffles the training indices with a stream derived from
// (seed, epoch) and takes one Adam step per minibatch of mean BCE.
template <typename S>
class Trainer {
 public:
  Trainer(const TrainConfig& cfg, const Dataset<S>& train_set)
      : cfg_(cfg), data_(train_set), model_(build_model<S>(cfg.model, cfg.seed)), adam_(cfg.lr) {
    cfg_.validate();
    check_trainable_labels(data_.labels, "training");
    check_batch(cfg_.model, data_.x);
  }

  // Returns the sample-weighted mean training loss of the epoch.
  double run_epoch() {
    ++epoch_;
    const std::size_t N = data_.size();
    std::vector<std::size_t> order(N);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(cfg_.seed, epoch_));
    rng.shuffle(std::span<std::size_t>(order));
    double loss_sum = 0.0;
    for (std::size_t lo = 0; lo < N; lo += cfg_.batch_size) {
      const std::size_t hi = std::min(N, lo + cfg_.batch_size);
      const std::span<const std::size_t> idx(order.data() + lo, hi - lo);
      std::vector<int> labels;
      for (std::size_t i : idx) labels.push_back(data_.labels[i]);
      const auto bl = loss_and_grad(model_, gather_batch(data_.x, idx), labels, cfg_.threads);
      if (!std::isfinite(bl.loss)) throw NumericError("non-finite training loss");
      loss_sum += bl.loss * static_cast<double>(idx.size());
      adam_step(model_.params, adam_);
    }
    return loss_sum / static_cast<double>(N);
  }

  std::size_t epoch() const { return epoch_; }
  ModelInstance<S>& model() { return model_; }
  const ModelInstance<S>& model() const { return model_; }

 private:
  TrainConfig cfg_;
  const Dataset<S>& data_;
  ModelInstance<S> model_;
  AdamState<S> adam_;
  std::size_t epoch_ = 0;
};

using EpochHook = std::function<void(const CurveRow&)>;

// Runs cfg.epochs epochs. The eval loss (held-out split, or the training
// split when none is given) selects the best checkpoint; ties keep the
// earlier epoch. SVM heads are fitted on the training features afterwards.
template <typename S>
TrainResult<S> train(const TrainConfig& cfg, const Dataset<S>& train_set,
                     const Dataset<S>* eval_set = nullptr, const EpochHook& on_epoch = {}) {
  if (eval_set && eval_set->size() == 0) throw ValueError("evaluation dataset is empty");
  Trainer<S> tr(cfg, train_set);
  const Dataset<S>& ev = eval_set ? *eval_set : train_set;
  TrainResult<S> res{tr.model(), tr.model(), 0, {}};
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t e = 1; e <= cfg.epochs; ++e) {
    const double train_loss = tr.run_epoch();
    // The SVM head is fitted after training, so epochs are scored via the FC head.
    auto scored = tr.model();
    scored.config.head = HeadKind::Fc;
    const CurveRow row{e, train_loss, dataset_loss(scored, ev, cfg.threads)};
    res.curve.push_back(row);
    if (row.eval_loss < best) {
      best = row.eval_loss;
      res.best_model = tr.model();
      res.best_epoch = e;
    }
    if (on_epoch) on_epoch(row);
  }
  res.final_model = tr.model();
  fit_svm_head(res.final_model, train_set, cfg.svm, cfg.threads);
  fit_svm_head(res.best_model, train_set, cfg.svm, cfg.threads);
  return res;
}

}  // namespace dynfuse
