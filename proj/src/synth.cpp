#include "tsi/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "tsi/rng.hpp"
#include "tsi/tensor_io.hpp"

namespace tsi::synth {

using nlohmann::json;

namespace {

constexpr std::int64_t kTexturePeriod = 32;

constexpr std::array<std::array<float, 3>, 6> kPalette{{
    {1.0f, 0.1f, 0.1f},
    {0.1f, 1.0f, 0.1f},
    {0.1f, 0.1f, 1.0f},
    {1.0f, 1.0f, 0.1f},
    {1.0f, 0.1f, 1.0f},
    {0.1f, 1.0f, 1.0f},
}};

std::int64_t wrap(std::int64_t v, std::int64_t p) { return ((v % p) + p) % p; }

double smooth(double t) { return t * t * (3.0 - 2.0 * t); }

/// Periodic value noise, two octaves, on a kTexturePeriod square per channel.
std::vector<float> make_texture(std::uint64_t seed) {
  Rng rng(seed);
  const std::int64_t p = kTexturePeriod;
  std::vector<float> tex(3 * p * p, 0.0f);
  const std::array<std::int64_t, 2> cells{8, 4};
  const std::array<double, 2> weights{0.65, 0.35};
  std::vector<double> gray(p * p, 0.0);
  for (std::size_t o = 0; o < cells.size(); ++o) {
    const std::int64_t cell = cells[o], n = p / cell;
    std::vector<double> lattice(n * n);
    for (auto& v : lattice) v = rng.uniform();
    for (std::int64_t y = 0; y < p; ++y) {
      for (std::int64_t x = 0; x < p; ++x) {
        const std::int64_t cx = x / cell, cy = y / cell;
        const double fx = smooth(static_cast<double>(x % cell) / cell);
        const double fy = smooth(static_cast<double>(y % cell) / cell);
        auto at = [&](std::int64_t i, std::int64_t j) { return lattice[wrap(j, n) * n + wrap(i, n)]; };
        const double top = at(cx, cy) * (1 - fx) + at(cx + 1, cy) * fx;
        const double bottom = at(cx, cy + 1) * (1 - fx) + at(cx + 1, cy + 1) * fx;
        gray[y * p + x] += weights[o] * (top * (1 - fy) + bottom * fy);
      }
    }
  }
  std::array<double, 3> tint{};
  for (auto& t : tint) t = rng.uniform(-0.08, 0.08);
  for (std::int64_t c = 0; c < 3; ++c) {
    for (std::int64_t i = 0; i < p * p; ++i) {
      const double v = 0.15 + 0.7 * gray[i] + tint[c];
      tex[c * p * p + i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  return tex;
}

bool inside_shape(ShapeKind kind, std::int64_t size, std::int64_t i, std::int64_t j) {
  switch (kind) {
    case ShapeKind::kSquare:
      return true;
    case ShapeKind::kDisc: {
      const double r = size / 2.0, dx = j + 0.5 - r, dy = i + 0.5 - r;
      return dx * dx + dy * dy <= r * r;
    }
    case ShapeKind::kBar: {
      const std::int64_t h = std::max<std::int64_t>(1, size / 2), top = (size - h) / 2;
      return i >= top && i < top + h;
    }
  }
  return false;
}

template <typename V>
void read_opt(const json& j, const char* key, V& out) {
  if (j.contains(key)) out = j.at(key).get<V>();
}

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
  for (const auto& [k, v] : j.items()) {
    if (!allowed.count(k)) throw ConfigError(where + ": unknown key '" + k + "'");
  }
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return std::move(ss).str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace

std::string shape_name(ShapeKind k) {
  switch (k) {
    case ShapeKind::kSquare: return "square";
    case ShapeKind::kDisc: return "disc";
    case ShapeKind::kBar: return "bar";
  }
  return "?";
}

ShapeKind parse_shape(const std::string& s) {
  if (s == "square") return ShapeKind::kSquare;
  if (s == "disc") return ShapeKind::kDisc;
  if (s == "bar") return ShapeKind::kBar;
  throw ConfigError("unknown shape '" + s + "' (square|disc|bar)");
}

MotionClass parse_motion_class(const std::string& name, int speed_min, int speed_max) {
  MotionClass mc;
  mc.name = name;
  mc.speed_min = speed_min;
  mc.speed_max = speed_max;
  std::string base = name;
  const auto us = name.rfind('_');
  if (us != std::string::npos) {
    const std::string suffix = name.substr(us + 1);
    base = name.substr(0, us);
    if (suffix == "fast") {
      mc.speed_min = mc.speed_max = speed_max;
    } else if (suffix == "slow") {
      mc.speed_min = mc.speed_max = speed_min;
    } else {
      throw ConfigError("unknown motion class '" + name + "'");
    }
  }
  if (base == "up") mc.dy = -1;
  else if (base == "down") mc.dy = 1;
  else if (base == "left") mc.dx = -1;
  else if (base == "right") mc.dx = 1;
  else if (base != "static") throw ConfigError("unknown motion class '" + name + "'");
  return mc;
}

void ClipSpec::validate() const {
  if (frames < 1 || height < 1 || width < 1) throw ConfigError("clip: frames and size must be positive");
  if (shape_size < 1 || shape_size > height || shape_size > width) {
    throw ConfigError("clip: shape size " + std::to_string(shape_size) + " does not fit a " + std::to_string(height) +
                      "x" + std::to_string(width) + " frame");
  }
  if (camera_jitter < 0) throw ConfigError("clip: camera jitter must be >= 0");
  for (const float c : shape_color) {
    if (!(c >= 0.0f && c <= 1.0f)) throw ConfigError("clip: shape color outside [0,1]");
  }
  for (std::int64_t t = 0; t < frames; ++t) {
    const std::int64_t x = start_x + t * velocity_x, y = start_y + t * velocity_y;
    if (x < 0 || y < 0 || x + shape_size > width || y + shape_size > height) {
      throw ConfigError("clip: trajectory leaves the frame at t=" + std::to_string(t) + " (x=" + std::to_string(x) +
                        ", y=" + std::to_string(y) + ")");
    }
  }
}

json ClipSpec::to_json() const {
  return {{"frames", frames},
          {"height", height},
          {"width", width},
          {"shape", shape_name(shape)},
          {"shape_size", shape_size},
          {"shape_color", shape_color},
          {"start", {start_x, start_y}},
          {"velocity", {velocity_x, velocity_y}},
          {"camera_jitter", camera_jitter},
          {"texture_seed", texture_seed},
          {"label", label}};
}

ClipSpec ClipSpec::from_json(const json& j) {
  try {
    ClipSpec s;
    s.frames = j.at("frames").get<std::int64_t>();
    s.height = j.at("height").get<std::int64_t>();
    s.width = j.at("width").get<std::int64_t>();
    s.shape = parse_shape(j.at("shape").get<std::string>());
    s.shape_size = j.at("shape_size").get<std::int64_t>();
    s.shape_color = j.at("shape_color").get<std::array<float, 3>>();
    s.start_x = j.at("start").at(0).get<std::int64_t>();
    s.start_y = j.at("start").at(1).get<std::int64_t>();
    s.velocity_x = j.at("velocity").at(0).get<std::int64_t>();
    s.velocity_y = j.at("velocity").at(1).get<std::int64_t>();
    s.camera_jitter = j.at("camera_jitter").get<std::int64_t>();
    s.texture_seed = j.at("texture_seed").get<std::uint64_t>();
    s.label = j.at("label").get<int>();
    return s;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("clip spec: ") + e.what());
  }
}

std::string ClipSpec::digest() const { return fnv1a_hex(to_json().dump()); }

std::vector<std::array<std::int64_t, 2>> camera_path(const ClipSpec& spec, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::array<std::int64_t, 2>> path(spec.frames, {0, 0});
  for (std::int64_t t = 1; t < spec.frames; ++t) {
    path[t] = path[t - 1];
    if (spec.camera_jitter > 0) {
      path[t][0] += rng.integer(-spec.camera_jitter, spec.camera_jitter);
      path[t][1] += rng.integer(-spec.camera_jitter, spec.camera_jitter);
    }
  }
  return path;
}

Tensor<float> generate_clip(const ClipSpec& spec, std::uint64_t seed) {
  spec.validate();
  const std::int64_t t_n = spec.frames, h = spec.height, w = spec.width, p = kTexturePeriod;
  const auto tex = make_texture(spec.texture_seed);
  const auto path = camera_path(spec, seed);
  Tensor<float> clip(Shape{t_n, 3, h, w});
  float* out = clip.raw();
  for (std::int64_t t = 0; t < t_n; ++t) {
    const std::int64_t ox = path[t][0], oy = path[t][1];
    for (std::int64_t c = 0; c < 3; ++c) {
      float* plane = out + (t * 3 + c) * h * w;
      const float* tp = tex.data() + c * p * p;
      for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x) plane[y * w + x] = tp[wrap(y - oy, p) * p + wrap(x - ox, p)];
    }
    const std::int64_t sx = spec.start_x + t * spec.velocity_x, sy = spec.start_y + t * spec.velocity_y;
    for (std::int64_t i = 0; i < spec.shape_size; ++i) {
      for (std::int64_t j = 0; j < spec.shape_size; ++j) {
        if (!inside_shape(spec.shape, spec.shape_size, i, j)) continue;
        for (std::int64_t c = 0; c < 3; ++c) out[((t * 3 + c) * h + sy + i) * w + sx + j] = spec.shape_color[c];
      }
    }
  }
  return clip;
}

void DatasetConfig::validate() const {
  if (classes.empty()) throw ConfigError("dataset: at least one class is required");
  if (std::set<std::string>(classes.begin(), classes.end()).size() != classes.size()) {
    throw ConfigError("dataset: duplicate class names");
  }
  if (clips_per_class < 1) throw ConfigError("dataset: clips_per_class must be >= 1");
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw ConfigError("dataset: val_fraction must lie in [0, 1)");
  if (frames < 1 || height < 1 || width < 1) throw ConfigError("dataset: frames and size must be positive");
  if (speed_min < 0 || speed_max < speed_min) throw ConfigError("dataset: invalid speed range");
  if (camera_jitter < 0) throw ConfigError("dataset: camera jitter must be >= 0");
  if (shapes.empty()) throw ConfigError("dataset: at least one shape kind is required");
  for (const auto& s : shapes) (void)parse_shape(s);
  for (const auto& c : classes) {
    const MotionClass mc = parse_motion_class(c, speed_min, speed_max);
    const std::int64_t span = (frames - 1) * mc.speed_max;
    if (shape_size + span > std::min(width, height)) {
      throw ConfigError("dataset: class '" + c + "' cannot keep a " + std::to_string(shape_size) +
                        "px shape inside the frame at speed " + std::to_string(mc.speed_max));
    }
  }
}

json DatasetConfig::to_json() const {
  return {{"seed", seed},
          {"classes", classes},
          {"clips_per_class", clips_per_class},
          {"val_fraction", val_fraction},
          {"frames", frames},
          {"height", height},
          {"width", width},
          {"shape_size", shape_size},
          {"speed_min", speed_min},
          {"speed_max", speed_max},
          {"camera_jitter", camera_jitter},
          {"shapes", shapes}};
}

DatasetConfig DatasetConfig::from_json(const json& j) {
  try {
    check_keys(j,
               {"seed", "classes", "clips_per_class", "val_fraction", "frames", "height", "width", "shape_size",
                "speed_min", "speed_max", "camera_jitter", "shapes"},
               "dataset config");
    DatasetConfig c;
    read_opt(j, "seed", c.seed);
    read_opt(j, "classes", c.classes);
    read_opt(j, "clips_per_class", c.clips_per_class);
    read_opt(j, "val_fraction", c.val_fraction);
    read_opt(j, "frames", c.frames);
    read_opt(j, "height", c.height);
    read_opt(j, "width", c.width);
    read_opt(j, "shape_size", c.shape_size);
    read_opt(j, "speed_min", c.speed_min);
    read_opt(j, "speed_max", c.speed_max);
    read_opt(j, "camera_jitter", c.camera_jitter);
    read_opt(j, "shapes", c.shapes);
    c.validate();
    return c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("dataset config: ") + e.what());
  }
}

namespace {

/// Frame-0 coordinate and velocity on one axis. A moving axis sweeps a + k*v for
/// k = 0..T-1 over time; a still axis sits at a + u*v for a random u, so a single
/// frame's position has the same law whichever axis moves.
std::pair<std::int64_t, std::int64_t> axis_track(int direction, std::int64_t base, std::int64_t offset,
                                                 std::int64_t speed, std::int64_t frames) {
  const std::int64_t span = (frames - 1) * speed;
  if (direction > 0) return {base, speed};
  if (direction < 0) return {base + span, -speed};
  return {base + offset * speed, 0};
}

}  // namespace

ClipSpec sample_clip_spec(const DatasetConfig& cfg, int label, std::uint64_t seed) {
  if (label < 0 || label >= static_cast<int>(cfg.classes.size())) throw ConfigError("dataset: label out of range");
  const MotionClass mc = parse_motion_class(cfg.classes[label], cfg.speed_min, cfg.speed_max);
  Rng rng(seed);
  ClipSpec s;
  s.frames = cfg.frames;
  s.height = cfg.height;
  s.width = cfg.width;
  s.shape_size = cfg.shape_size;
  s.camera_jitter = cfg.camera_jitter;
  s.label = label;
  const std::int64_t speed = rng.integer(mc.speed_min, mc.speed_max);
  const std::int64_t span = (cfg.frames - 1) * speed;
  const std::int64_t base_x = rng.integer(0, cfg.width - cfg.shape_size - span);
  const std::int64_t base_y = rng.integer(0, cfg.height - cfg.shape_size - span);
  const std::int64_t off_x = rng.integer(0, cfg.frames - 1);
  const std::int64_t off_y = rng.integer(0, cfg.frames - 1);
  std::tie(s.start_x, s.velocity_x) = axis_track(mc.dx, base_x, off_x, speed, cfg.frames);
  std::tie(s.start_y, s.velocity_y) = axis_track(mc.dy, base_y, off_y, speed, cfg.frames);
  s.shape = parse_shape(cfg.shapes[rng.index(cfg.shapes.size())]);
  s.shape_color = kPalette[rng.index(kPalette.size())];
  s.texture_seed = rng.next();
  s.validate();
  return s;
}

json DatasetManifest::to_json() const {
  json entries_json = json::array();
  for (const auto& e : entries) {
    entries_json.push_back({{"id", e.id},
                            {"path", e.path},
                            {"label", e.label},
                            {"digest", e.digest},
                            {"spec_digest", e.spec_digest},
                            {"spec", e.spec.to_json()}});
  }
  return {{"schema_version", schema_version},
          {"split", split},
          {"global_seed", global_seed},
          {"class_names", class_names},
          {"entries", entries_json}};
}

DatasetManifest DatasetManifest::from_json(const json& j) {
  try {
    DatasetManifest m;
    m.schema_version = j.at("schema_version").get<int>();
    if (m.schema_version != 1) {
      throw ConfigError("manifest: unsupported schema version " + std::to_string(m.schema_version));
    }
    m.split = j.at("split").get<std::string>();
    m.global_seed = j.at("global_seed").get<std::uint64_t>();
    m.class_names = j.at("class_names").get<std::vector<std::string>>();
    for (const auto& e : j.at("entries")) {
      ManifestEntry me;
      me.id = e.at("id").get<std::string>();
      me.path = e.at("path").get<std::string>();
      me.label = e.at("label").get<int>();
      me.digest = e.at("digest").get<std::string>();
      me.spec_digest = e.at("spec_digest").get<std::string>();
      me.spec = ClipSpec::from_json(e.at("spec"));
      if (me.label < 0 || me.label >= static_cast<int>(m.class_names.size())) {
        throw ConfigError("manifest: entry " + me.id + " has label " + std::to_string(me.label) + " outside [0, " +
                          std::to_string(m.class_names.size()) + ")");
      }
      m.entries.push_back(std::move(me));
    }
    return m;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("manifest: ") + e.what());
  }
}

DatasetManifest DatasetManifest::load(const std::filesystem::path& path) {
  const std::string text = read_file(path);
  try {
    return from_json(json::parse(text));
  } catch (const json::parse_error& e) {
    throw ConfigError("manifest " + path.string() + ": " + e.what());
  }
}

void DatasetManifest::save(const std::filesystem::path& path) const { write_file(path, to_json().dump(1) + "\n"); }

BuiltDataset build_dataset(const DatasetConfig& cfg, const std::filesystem::path& out_dir) {
  cfg.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "clips", ec);
  if (ec) throw IoError("cannot create " + (out_dir / "clips").string() + ": " + ec.message());

  const auto classes = static_cast<std::int64_t>(cfg.classes.size());
  const std::int64_t val_per_class = std::llround(static_cast<double>(cfg.clips_per_class) * cfg.val_fraction);
  BuiltDataset out;
  for (auto* m : {&out.train, &out.val}) {
    m->global_seed = cfg.seed;
    m->class_names = cfg.classes;
  }
  out.train.split = "train";
  out.val.split = "val";

  // Clip i has label i % classes; the validation members of each class are a seeded draw.
  std::vector<bool> is_val(classes * cfg.clips_per_class, false);
  Rng split_rng(mix_seed(cfg.seed, 0x5b17));
  for (std::int64_t c = 0; c < classes; ++c) {
    std::vector<std::int64_t> members;
    for (std::int64_t k = 0; k < cfg.clips_per_class; ++k) members.push_back(k * classes + c);
    split_rng.shuffle(members);
    for (std::int64_t k = 0; k < val_per_class; ++k) is_val[members[k]] = true;
  }

  for (std::int64_t i = 0; i < classes * cfg.clips_per_class; ++i) {
    const std::uint64_t clip_seed = mix_seed(cfg.seed, static_cast<std::uint64_t>(i) + 1);
    ManifestEntry e;
    char id[32];
    std::snprintf(id, sizeof(id), "clip_%06lld", static_cast<long long>(i));
    e.id = id;
    e.path = "clips/" + e.id + ".tsit";
    e.label = static_cast<int>(i % classes);
    e.spec = sample_clip_spec(cfg, e.label, clip_seed);
    e.spec_digest = e.spec.digest();
    const std::string bytes = tensor_bytes(generate_clip(e.spec, mix_seed(clip_seed, 1)));
    e.digest = fnv1a_hex(bytes);
    write_file(out_dir / e.path, bytes);
    (is_val[i] ? out.val : out.train).entries.push_back(std::move(e));
  }
  out.train.save(out_dir / "train.json");
  out.val.save(out_dir / "val.json");
  write_file(out_dir / "dataset_config.json", cfg.to_json().dump(1) + "\n");
  return out;
}

ClipSet load_split(const std::filesystem::path& root, const std::string& split) {
  ClipSet set;
  set.manifest = DatasetManifest::load(root / (split + ".json"));
  for (const auto& e : set.manifest.entries) {
    const auto path = root / e.path;
    const std::string bytes = read_file(path);
    if (fnv1a_hex(bytes) != e.digest) {
      throw IoError("digest mismatch for " + path.string() + " (manifest " + e.digest + ")");
    }
    std::istringstream is(bytes, std::ios::binary);
    set.clips.push_back(read_tensor<float>(is));
    set.labels.push_back(e.label);
  }
  return set;
}

}  // namespace tsi::synth
