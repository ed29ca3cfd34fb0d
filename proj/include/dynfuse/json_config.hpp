#pragma once

#include <array>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "dynfuse/core/error.hpp"
#include "dynfuse/model.hpp"

// Strict JSON readers: every key of an object must be consumed, so a typo
// surfaces as an error instead of a silently ignored setting.
namespace dynfuse {

using Json = nlohmann::ordered_json;

class StrictObject {
 public:
  StrictObject(const Json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected a JSON object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  template <typename T>
  void read(const std::string& key, T& out) {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    try {
      out = j_.at(key).template get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(where_ + "." + key + ": wrong type (" + e.what() + ")");
    }
  }

  template <typename E>
  void read_enum(const std::string& key, E& out,
                 const std::vector<std::pair<E, std::string>>& names) {
    std::string s;
    if (!j_.contains(key)) return;
    read(key, s);
    out = enum_parse(s, names, (where_ + "." + key).c_str());
  }

  const Json& child(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  // Throws on any key not read.
  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) {
        throw ConfigError(where_ + ": unknown key '" + it.key() + "'");
      }
    }
  }

 private:
  const Json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

inline Json to_json(const ModelConfig& c) {
  return {{"variant", to_string(c.variant)},
          {"backbone", to_string(c.backbone)},
          {"use_cbam", c.use_cbam},
          {"head", to_string(c.head)},
          {"fusion", to_string(c.fusion)},
          {"chunk_k", c.chunk_k},
          {"preset", to_string(c.preset)},
          {"input_channels", c.input_channels},
          {"input_dims", c.input_dims},
          {"cbam_reduction", c.cbam_reduction},
          {"spatial_kernel", c.spatial_kernel}};
}

inline ModelConfig model_config_from_json(const Json& j, const std::string& where = "model") {
  ModelConfig c;
  StrictObject o(j, where);
  o.read_enum("variant", c.variant, variant_names());
  o.read_enum("backbone", c.backbone, backbone_names());
  o.read("use_cbam", c.use_cbam);
  o.read_enum("head", c.head, head_names());
  o.read_enum("fusion", c.fusion, fusion_names());
  o.read("chunk_k", c.chunk_k);
  o.read_enum("preset", c.preset, preset_names());
  o.read("input_channels", c.input_channels);
  o.read("input_dims", c.input_dims);
  o.read("cbam_reduction", c.cbam_reduction);
  o.read("spatial_kernel", c.spatial_kernel);
  o.finish();
  c.validate();
  return c;
}

}  // namespace dynfuse
