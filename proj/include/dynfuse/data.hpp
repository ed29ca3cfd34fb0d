#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "dynfuse/core/error.hpp"
#include "dynfuse/core/rng.hpp"
#include "dynfuse/core/tensor.hpp"
#include "dynfuse/loss.hpp"

// Volume files, intensity normalisation, the two-class phantom generator and
// subject-level splitting.
//
// A volume is stored as `<stem>.vol` (D*H*W little-endian IEEE floats, depth
// slowest) next to a `<stem>.json` sidecar:
//   {"dims": [D, H, W], "dtype": "f32le", "label": 0|1, "subject_id": "...", "seed": n}
namespace dynfuse {

namespace fs = std::filesystem;

class VolumeLengthError : public IoError {
 public:
  using IoError::IoError;
};
class VolumeDtypeError : public IoError {
 public:
  using IoError::IoError;
};
class MissingSidecarError : public IoError {
 public:
  using IoError::IoError;
};

using Dims3 = std::array<std::size_t, 3>;

struct VolumeRecord {
  Dims3 dims{0, 0, 0};
  std::vector<float> data;
  int label = 0;
  std::string subject_id;
  std::uint64_t seed = 0;

  std::size_t voxels() const { return dims[0] * dims[1] * dims[2]; }
};

inline fs::path sidecar_path(const fs::path& vol) {
  auto p = vol;
  p.replace_extension(".json");
  return p;
}

namespace detail {

inline void write_bytes(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

inline std::string read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string() + " for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline nlohmann::json read_json(const fs::path& path) {
  const auto text = read_bytes(path);
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

inline void put_u32le(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline std::uint32_t get_u32le(const char* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}

}  // namespace detail

inline std::string encode_f32le(std::span<const float> values) {
  std::string out;
  out.reserve(values.size() * 4);
  for (float v : values) detail::put_u32le(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

inline std::vector<float> decode_f32le(const std::string& bytes) {
  if (bytes.size() % 4 != 0) throw VolumeLengthError("blob length is not a multiple of 4");
  std::vector<float> out(bytes.size() / 4);
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = std::bit_cast<float>(detail::get_u32le(bytes.data() + 4 * i));
  return out;
}

inline nlohmann::json volume_header(const VolumeRecord& v) {
  return {{"dims", {v.dims[0], v.dims[1], v.dims[2]}},
          {"dtype", "f32le"},
          {"label", v.label},
          {"subject_id", v.subject_id},
          {"seed", v.seed}};
}

inline void save_volume(const fs::path& path, const VolumeRecord& v) {
  check_label(v.label);
  if (v.data.size() != v.voxels()) {
    throw VolumeLengthError("volume " + v.subject_id + ": " + std::to_string(v.data.size()) +
                            " values for dims product " + std::to_string(v.voxels()));
  }
  detail::write_bytes(path, encode_f32le(v.data));
  detail::write_bytes(sidecar_path(path), volume_header(v).dump(2) + "\n");
}

inline VolumeRecord load_volume(const fs::path& path) {
  const auto side = sidecar_path(path);
  if (!fs::exists(side)) throw MissingSidecarError("missing sidecar " + side.string());
  const auto h = detail::read_json(side);
  VolumeRecord v;
  try {
    if (h.at("dtype").get<std::string>() != "f32le") {
      throw VolumeDtypeError("unsupported dtype '" + h.at("dtype").get<std::string>() +
                             "' in " + side.string() + " (expected f32le)");
    }
    const auto d = h.at("dims").get<std::vector<std::size_t>>();
    if (d.size() != 3) throw IoError("dims in " + side.string() + " must have 3 entries");
    v.dims = {d[0], d[1], d[2]};
    v.label = h.at("label").get<int>();
    v.subject_id = h.at("subject_id").get<std::string>();
    v.seed = h.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError("bad sidecar " + side.string() + ": " + e.what());
  }
  check_label(v.label);
  const auto bytes = detail::read_bytes(path);
  if (bytes.size() != v.voxels() * 4) {
    throw VolumeLengthError(path.string() + " holds " + std::to_string(bytes.size()) +
                            " bytes but dims need " + std::to_string(v.voxels() * 4));
  }
  v.data = decode_f32le(bytes);
  return v;
}

// Per-volume z-score with population std; constant input maps to zeros.
template <typename S>
std::vector<S> normalize_intensity(std::span<const S> x) {
  std::vector<S> out(x.size(), S{0});
  if (x.empty()) return out;
  double mean = 0.0;
  for (S v : x) mean += static_cast<double>(v);
  mean /= static_cast<double>(x.size());
  double var = 0.0;
  for (S v : x) var += (static_cast<double>(v) - mean) * (static_cast<double>(v) - mean);
  const double sd = std::sqrt(var / static_cast<double>(x.size()));
  if (sd < 1e-12) return out;
  for (std::size_t i = 0; i < x.size(); ++i)
    out[i] = static_cast<S>((static_cast<double>(x[i]) - mean) / sd);
  return out;
}

inline VolumeRecord normalize_intensity(const VolumeRecord& v) {
  VolumeRecord out = v;
  out.data = normalize_intensity<float>(v.data);
  return out;
}

// ---------------------------------------------------------------------------
// Phantoms: a centred ellipsoid of intensity 1 with a centred spherical cavity
// of intensity 0, plus Gaussian noise. Cavity radii are fractions of the
// smallest extent; class 1 draws from the larger range.

struct PhantomConfig {
  std::size_t count_per_class = 75;
  Dims3 dims{32, 32, 32};
  std::array<double, 3> semi_axes{0.40, 0.44, 0.36};  // fractions of each extent
  std::array<double, 2> cavity_class0{0.08, 0.14};
  std::array<double, 2> cavity_class1{0.18, 0.24};
  double noise_sigma = 0.1;
  std::uint64_t seed = 0;

  static PhantomConfig paper_preset() {
    PhantomConfig c;
    c.dims = {110, 110, 110};
    return c;
  }

  void validate() const {
    if (count_per_class < 1) throw ConfigError("phantom count_per_class must be >= 1");
    for (auto d : dims)
      if (d < 1) throw ConfigError("phantom dims must be positive");
    if (!(noise_sigma >= 0.0)) throw ConfigError("phantom noise_sigma must be >= 0");
    for (const auto& r : {cavity_class0, cavity_class1}) {
      if (!(r[0] > 0.0 && r[0] <= r[1])) {
        throw ConfigError("phantom cavity range must satisfy 0 < lo <= hi");
      }
    }
    if (!(cavity_class1[0] > cavity_class0[1])) {
      throw ConfigError("phantom cavity ranges overlap: class 1 range must lie strictly above "
                        "class 0 range");
    }
    for (double a : semi_axes)
      if (!(a > 0.0)) throw ConfigError("phantom semi_axes must be positive");
  }
};

inline std::string subject_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "sub-%04zu", index);
  return buf;
}

// Subject `index` in [0, 2*count): the first half is class 0.
inline VolumeRecord phantom_volume(const PhantomConfig& cfg, std::size_t index) {
  cfg.validate();
  if (index >= 2 * cfg.count_per_class) throw ValueError("phantom index out of range");
  VolumeRecord v;
  v.dims = cfg.dims;
  v.label = index < cfg.count_per_class ? 0 : 1;
  v.subject_id = subject_name(index);
  v.seed = derive_seed(cfg.seed, index);
  Rng rng(v.seed);
  const auto& range = v.label == 0 ? cfg.cavity_class0 : cfg.cavity_class1;
  const double extent = static_cast<double>(*std::min_element(cfg.dims.begin(), cfg.dims.end()));
  const double r = rng.uniform(range[0], range[1]) * extent;
  const auto [D, H, W] = cfg.dims;
  std::array<double, 3> c, a;
  for (int i = 0; i < 3; ++i) {
    c[i] = (static_cast<double>(cfg.dims[i]) - 1.0) / 2.0;
    a[i] = cfg.semi_axes[i] * static_cast<double>(cfg.dims[i]);
  }
  v.data.resize(D * H * W);
  std::size_t k = 0;
  for (std::size_t z = 0; z < D; ++z)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x, ++k) {
        const double dz = z - c[0], dy = y - c[1], dx = x - c[2];
        const double e = (dz / a[0]) * (dz / a[0]) + (dy / a[1]) * (dy / a[1]) +
                         (dx / a[2]) * (dx / a[2]);
        double val = (e <= 1.0 && dz * dz + dy * dy + dx * dx > r * r) ? 1.0 : 0.0;
        if (cfg.noise_sigma > 0.0) val += cfg.noise_sigma * rng.normal();
        v.data[k] = static_cast<float>(val);
      }
  return v;
}

// ---------------------------------------------------------------------------
// Manifest: JSON array of {path, label, subject_id, split}; paths are relative
// to the manifest's directory.

struct ManifestEntry {
  std::string path;
  int label = 0;
  std::string subject_id;
  std::string split = "train";
};

using Manifest = std::vector<ManifestEntry>;

inline nlohmann::json manifest_json(const Manifest& m) {
  auto arr = nlohmann::json::array();
  for (const auto& e : m) {
    arr.push_back({{"path", e.path}, {"label", e.label}, {"subject_id", e.subject_id},
                   {"split", e.split}});
  }
  return arr;
}

inline void save_manifest(const fs::path& path, const Manifest& m) {
  detail::write_bytes(path, manifest_json(m).dump(2) + "\n");
}

inline Manifest load_manifest(const fs::path& path) {
  const auto j = detail::read_json(path);
  if (!j.is_array()) throw IoError("manifest " + path.string() + " must be a JSON array");
  Manifest m;
  try {
    for (const auto& e : j) {
      ManifestEntry en{e.at("path").get<std::string>(), e.at("label").get<int>(),
                       e.at("subject_id").get<std::string>(), e.at("split").get<std::string>()};
      check_label(en.label);
      if (en.split != "train" && en.split != "test") {
        throw IoError("manifest split must be train or test, got '" + en.split + "'");
      }
      m.push_back(std::move(en));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError("bad manifest " + path.string() + ": " + e.what());
  }
  return m;
}

// Writes every phantom volume into `dir` and returns the unsplit manifest.
inline Manifest generate_phantom_dataset(const PhantomConfig& cfg, const fs::path& dir) {
  cfg.validate();
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) {
    throw IoError("cannot create output directory " + dir.string());
  }
  Manifest m;
  for (std::size_t i = 0; i < 2 * cfg.count_per_class; ++i) {
    const auto v = phantom_volume(cfg, i);
    const std::string name = v.subject_id + ".vol";
    save_volume(dir / name, v);
    m.push_back({name, v.label, v.subject_id, "train"});
  }
  return m;
}

// Stratified subject-level split: each class is shuffled with its own seeded
// stream and its first round(ratio * n) subjects go to train.
inline Manifest split_dataset(const Manifest& in, double ratio, std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("split ratio must be in (0, 1)");
  std::set<std::string> ids;
  for (const auto& e : in) {
    if (!ids.insert(e.subject_id).second) {
      throw ValueError("duplicate subject_id " + e.subject_id + " in manifest");
    }
  }
  Manifest out = in;
  for (int c = 0; c < 2; ++c) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < in.size(); ++i)
      if (in[i].label == c) idx.push_back(i);
    if (idx.size() < 2) {
      throw ValueError("split needs at least 2 subjects per class, class " + std::to_string(c) +
                       " has " + std::to_string(idx.size()));
    }
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(c)));
    rng.shuffle(std::span<std::size_t>(idx));
    auto n_train = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(idx.size())));
    n_train = std::clamp<std::size_t>(n_train, 1, idx.size() - 1);
    for (std::size_t r = 0; r < idx.size(); ++r) out[idx[r]].split = r < n_train ? "train" : "test";
  }
  return out;
}

// Normalised volumes of one split as a batch [N, C, D, H, W], manifest order.
// Phantoms are single-channel; C > 1 replicates the channel.
template <typename S>
struct Dataset {
  Tensor<S> x;
  std::vector<int> labels;
  std::vector<std::string> subject_ids;

  std::size_t size() const { return labels.size(); }
};

template <typename S>
Dataset<S> load_split(const fs::path& manifest_path, const std::string& split,
                      std::size_t channels = 1) {
  if (channels < 1) throw ValueError("load_split: channels must be >= 1");
  const auto m = load_manifest(manifest_path);
  const auto base = manifest_path.parent_path();
  Dataset<S> ds;
  std::vector<S> flat;
  Dims3 dims{0, 0, 0};
  for (const auto& e : m) {
    if (e.split != split) continue;
    const auto v = load_volume(base / e.path);
    if (v.label != e.label || v.subject_id != e.subject_id) {
      throw IoError("manifest entry " + e.path + " disagrees with its sidecar");
    }
    if (ds.labels.empty()) dims = v.dims;
    if (v.dims != dims) throw ShapeError("volumes in " + split + " split differ in dims");
    std::vector<double> raw(v.data.begin(), v.data.end());
    const auto z = normalize_intensity<double>(raw);
    for (std::size_t c = 0; c < channels; ++c)
      for (double zi : z) flat.push_back(static_cast<S>(zi));
    ds.labels.push_back(v.label);
    ds.subject_ids.push_back(v.subject_id);
  }
  if (ds.labels.empty()) throw ValueError("split '" + split + "' is empty");
  ds.x = Tensor<S>({ds.labels.size(), channels, dims[0], dims[1], dims[2]}, std::move(flat));
  return ds;
}

// ---------------------------------------------------------------------------
// 8-bit binary PGM, min-max scaled; a constant image renders as 128.

inline std::string encode_pgm(std::size_t H, std::size_t W, std::span<const double> values) {
  if (values.size() != H * W) throw ShapeError("pgm: value count does not match H*W");
  std::string out = "P5\n" + std::to_string(W) + " " + std::to_string(H) + "\n255\n";
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  const double span = values.empty() ? 0.0 : *hi - *lo;
  for (double v : values) {
    if (!std::isfinite(v)) throw NumericError("pgm: non-finite pixel");
    const long q = span > 0.0 ? std::lround(255.0 * (v - *lo) / span) : 128;
    out.push_back(static_cast<char>(static_cast<unsigned char>(q)));
  }
  return out;
}

inline void write_pgm(const fs::path& path, std::size_t H, std::size_t W,
                      std::span<const double> values) {
  detail::write_bytes(path, encode_pgm(H, W, values));
}

}  // namespace dynfuse
