#pragma once

// Synthetic motion clips: an opaque shape moving over a periodic noise texture,
// with optional camera jitter that translates the background only.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "tsi/tensor.hpp"

namespace tsi::synth {

enum class ShapeKind { kSquare, kDisc, kBar };

std::string shape_name(ShapeKind k);
ShapeKind parse_shape(const std::string& s);

/// Unit direction of a motion class name: up, down, left, right, static,
/// optionally suffixed with _fast or _slow.
struct MotionClass {
  std::string name;
  int dx = 0;
  int dy = 0;
  int speed_min = 1;
  int speed_max = 2;
};
MotionClass parse_motion_class(const std::string& name, int speed_min, int speed_max);

struct ClipSpec {
  std::int64_t frames = 8;
  std::int64_t height = 32;
  std::int64_t width = 32;
  ShapeKind shape = ShapeKind::kSquare;
  std::int64_t shape_size = 6;
  std::array<float, 3> shape_color{1.0f, 1.0f, 1.0f};
  /// Top-left corner in frame 0 and per-frame displacement, pixels.
  std::int64_t start_x = 0;
  std::int64_t start_y = 0;
  std::int64_t velocity_x = 0;
  std::int64_t velocity_y = 0;
  /// Maximum background displacement per frame and axis; 0 is a static camera.
  std::int64_t camera_jitter = 0;
  std::uint64_t texture_seed = 0;
  int label = 0;

  /// Throws ConfigError when the trajectory leaves the frame or a field is invalid.
  void validate() const;
  nlohmann::json to_json() const;
  static ClipSpec from_json(const nlohmann::json& j);
  /// FNV-1a of the canonical JSON dump.
  std::string digest() const;
};

/// [T, 3, H, W] with values in [0, 1]. Deterministic in (spec, seed); the seed drives camera jitter.
Tensor<float> generate_clip(const ClipSpec& spec, std::uint64_t seed);

/// Per-frame background offsets (cumulative jitter), frame 0 at the origin.
std::vector<std::array<std::int64_t, 2>> camera_path(const ClipSpec& spec, std::uint64_t seed);

struct DatasetConfig {
  std::uint64_t seed = 0;
  std::vector<std::string> classes{"up", "down", "left", "right"};
  std::int64_t clips_per_class = 50;
  double val_fraction = 0.2;
  std::int64_t frames = 8;
  std::int64_t height = 32;
  std::int64_t width = 32;
  std::int64_t shape_size = 6;
  int speed_min = 1;
  int speed_max = 2;
  std::int64_t camera_jitter = 0;
  std::vector<std::string> shapes{"square", "disc", "bar"};

  void validate() const;
  nlohmann::json to_json() const;
  static DatasetConfig from_json(const nlohmann::json& j);
};

/// Draws the clip parameters for one item. Single-frame shape positions have the
/// same distribution for every class, so only motion separates labels.
ClipSpec sample_clip_spec(const DatasetConfig& cfg, int label, std::uint64_t seed);

struct ManifestEntry {
  std::string id;
  std::string path;  // relative to the dataset root
  int label = 0;
  std::string digest;       // FNV-1a of the clip file
  std::string spec_digest;  // ClipSpec::digest()
  ClipSpec spec;
};

struct DatasetManifest {
  int schema_version = 1;
  std::string split;
  std::uint64_t global_seed = 0;
  std::vector<std::string> class_names;
  std::vector<ManifestEntry> entries;

  nlohmann::json to_json() const;
  static DatasetManifest from_json(const nlohmann::json& j);
  static DatasetManifest load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
};

struct BuiltDataset {
  DatasetManifest train;
  DatasetManifest val;
};

/// Writes clips/clip_XXXXXX.tsit, train.json, val.json and dataset_config.json under out_dir.
/// The split is stratified per class and disjoint by clip id.
BuiltDataset build_dataset(const DatasetConfig& cfg, const std::filesystem::path& out_dir);

/// Loaded split with every clip digest verified.
struct ClipSet {
  DatasetManifest manifest;
  std::vector<Tensor<float>> clips;
  std::vector<int> labels;

  std::size_t size() const { return clips.size(); }
  std::int64_t num_classes() const { return static_cast<std::int64_t>(manifest.class_names.size()); }
};

/// Throws IoError naming the file on a missing clip or digest mismatch.
ClipSet load_split(const std::filesystem::path& root, const std::string& split);

}  // namespace tsi::synth
