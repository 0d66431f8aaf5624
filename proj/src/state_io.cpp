#include "tsi/state_io.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "tsi/tensor_io.hpp"

namespace tsi {

using nlohmann::json;

std::string tensor_file_stem(const std::string& name) {
  std::string out = name;
  for (char& c : out) {
    const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '.' ||
                    c == '_' || c == '-';
    if (!ok) c = '_';
  }
  return out;
}

template <typename T>
void save_state(const std::filesystem::path& dir, const NamedTensors<T>& tensors, const json& meta) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  json entries = json::array();
  std::set<std::string> files;
  for (const auto& [name, t] : tensors) {
    const std::string file = tensor_file_stem(name) + ".tsit";
    if (!files.insert(file).second) throw ConfigError("state: duplicate tensor file name " + file);
    const std::string bytes = tensor_bytes(*t);
    std::ofstream out(dir / file, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("cannot write " + (dir / file).string());
    entries.push_back({{"name", name}, {"file", file}, {"shape", t->shape()}, {"digest", fnv1a_hex(bytes)}});
  }
  json manifest{{"schema_version", 1}, {"dtype", dtype_of<T>() == DType::kFloat32 ? "f32" : "f64"},
                {"tensors", entries}, {"meta", meta}};
  std::ofstream out(dir / "manifest.json");
  out << manifest.dump(1) << "\n";
  if (!out) throw IoError("cannot write " + (dir / "manifest.json").string());
}

json read_state_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw IoError("cannot open " + (dir / "manifest.json").string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw IoError((dir / "manifest.json").string() + ": " + e.what());
  }
}

template <typename T>
json load_state(const std::filesystem::path& dir, const NamedTensors<T>& tensors) {
  const json manifest = read_state_manifest(dir);
  std::vector<std::pair<std::string, std::string>> stored;  // name, file
  std::vector<std::string> digests;
  for (const auto& e : manifest.at("tensors")) {
    stored.emplace_back(e.at("name").get<std::string>(), e.at("file").get<std::string>());
    digests.push_back(e.at("digest").get<std::string>());
  }
  if (stored.size() != tensors.size()) {
    throw ConfigError("state " + dir.string() + " holds " + std::to_string(stored.size()) + " tensors, expected " +
                      std::to_string(tensors.size()));
  }
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const auto& [name, target] = tensors[i];
    if (stored[i].first != name) {
      throw ConfigError("state " + dir.string() + ": entry " + std::to_string(i) + " is '" + stored[i].first +
                        "', expected '" + name + "'");
    }
    const auto path = dir / stored[i].second;
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    const std::string bytes = std::move(ss).str();
    if (fnv1a_hex(bytes) != digests[i]) throw IoError("digest mismatch for " + path.string());
    std::istringstream is(bytes, std::ios::binary);
    Tensor<T> t = read_tensor_as<T>(is);
    if (t.shape() != target->shape()) {
      throw ShapeError("state: '" + name + "' has shape " + shape_str(t.shape()) + ", expected " +
                       shape_str(target->shape()));
    }
    *target = std::move(t);
  }
  return manifest.value("meta", json::object());
}

template <typename T>
NamedTensors<T> named(const std::vector<Parameter<T>*>& params) {
  NamedTensors<T> out;
  for (auto* p : params) out.emplace_back(p->name, &p->value);
  return out;
}

#define TSI_INSTANTIATE_STATE(T)                                                                 \
  template void save_state<T>(const std::filesystem::path&, const NamedTensors<T>&, const json&); \
  template json load_state<T>(const std::filesystem::path&, const NamedTensors<T>&);              \
  template NamedTensors<T> named<T>(const std::vector<Parameter<T>*>&);

TSI_INSTANTIATE_STATE(float)
TSI_INSTANTIATE_STATE(double)

}  // namespace tsi
