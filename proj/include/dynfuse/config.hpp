#pragma once

#include <cstdint>
#include <string>

#include "dynfuse/data.hpp"
#include "dynfuse/json_config.hpp"
#include "dynfuse/optim.hpp"

// Run configuration document shared by every CLI subcommand:
//
//   {"seed": 0, "threads": 0,
//    "data":  {PhantomConfig fields, "split_ratio": 0.8},
//    "model": {ModelConfig fields},
//    "train": {"epochs", "batch_size", "lr", "precision", "svm_reg", "svm_iters"}}
//
// Every section and key is optional; unknown keys are errors. One seed drives
// data generation, the split and training.
namespace dynfuse {

struct RunConfig {
  std::uint64_t seed = 0;
  std::size_t threads = 0;
  PhantomConfig data;
  double split_ratio = 0.8;
  TrainConfig train;

  ModelConfig& model() { return train.model; }
  const ModelConfig& model() const { return train.model; }

  PhantomConfig phantom() const {
    auto p = data;
    p.seed = seed;
    return p;
  }

  TrainConfig train_config() const {
    auto t = train;
    t.seed = seed;
    t.threads = threads;
    return t;
  }

  void validate() const {
    data.validate();
    if (!(split_ratio > 0.0 && split_ratio < 1.0)) throw ConfigError("data.split_ratio must be in (0, 1)");
    train.validate();
  }
};

inline Json to_json(const PhantomConfig& p) {
  return {{"count_per_class", p.count_per_class}, {"dims", p.dims},
          {"semi_axes", p.semi_axes},             {"cavity_class0", p.cavity_class0},
          {"cavity_class1", p.cavity_class1},     {"noise_sigma", p.noise_sigma}};
}

inline Json to_json(const RunConfig& c) {
  auto data = to_json(c.data);
  data["split_ratio"] = c.split_ratio;
  return {{"seed", c.seed},
          {"threads", c.threads},
          {"data", data},
          {"model", to_json(c.model())},
          {"train",
           {{"epochs", c.train.epochs},
            {"batch_size", c.train.batch_size},
            {"lr", c.train.lr},
            {"precision", enum_name(c.train.precision, precision_names())},
            {"svm_reg", c.train.svm.reg},
            {"svm_iters", c.train.svm.iters}}}};
}

// Model input dims follow data.dims unless given explicitly, in which case
// they must agree.
inline RunConfig run_config_from_json(const Json& j) {
  RunConfig c;
  StrictObject top(j, "config");
  top.read("seed", c.seed);
  top.read("threads", c.threads);
  if (top.has("data")) {
    StrictObject d(top.child("data"), "config.data");
    std::string preset;
    d.read("preset", preset);
    if (!preset.empty()) {
      if (preset == "paper") {
        c.data = PhantomConfig::paper_preset();
      } else if (preset != "desk") {
        throw ConfigError("config.data.preset: unknown value '" + preset +
                          "' (expected one of: desk, paper)");
      }
    }
    d.read("count_per_class", c.data.count_per_class);
    d.read("dims", c.data.dims);
    d.read("semi_axes", c.data.semi_axes);
    d.read("cavity_class0", c.data.cavity_class0);
    d.read("cavity_class1", c.data.cavity_class1);
    d.read("noise_sigma", c.data.noise_sigma);
    d.read("split_ratio", c.split_ratio);
    d.finish();
  }
  bool explicit_dims = false;
  if (top.has("model")) {
    const Json& mj = top.child("model");
    explicit_dims = mj.is_object() && mj.contains("input_dims");
    Json m = mj;
    if (!explicit_dims && m.is_object()) m["input_dims"] = c.data.dims;
    if (m.is_object() && !m.contains("use_cbam") && m.contains("variant") &&
        m["variant"] == "conv3d_baseline") {
      m["use_cbam"] = false;
    }
    c.model() = model_config_from_json(m, "config.model");
  } else {
    c.model().input_dims = c.data.dims;
  }
  if (explicit_dims && c.model().input_dims != c.data.dims) {
    throw ConfigError("config.model.input_dims disagrees with config.data.dims");
  }
  if (top.has("train")) {
    StrictObject t(top.child("train"), "config.train");
    t.read("epochs", c.train.epochs);
    t.read("batch_size", c.train.batch_size);
    t.read("lr", c.train.lr);
    t.read_enum("precision", c.train.precision, precision_names());
    t.read("svm_reg", c.train.svm.reg);
    t.read("svm_iters", c.train.svm.iters);
    t.finish();
  }
  top.finish();
  c.validate();
  return c;
}

inline RunConfig load_run_config(const fs::path& path) {
  Json j;
  try {
    j = Json::parse(detail::read_bytes(path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  } catch (const IoError& e) {
    throw ConfigError(e.what());
  }
  return run_config_from_json(j);
}

}  // namespace dynfuse
