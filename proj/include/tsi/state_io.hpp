#pragma once

// Named tensor collections on disk: one .tsit file per tensor plus manifest.json
// listing name, file, shape and digest. Used for checkpoints and module weights.

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "tsi/autograd.hpp"

namespace tsi {

template <typename T>
using NamedTensors = std::vector<std::pair<std::string, Tensor<T>*>>;

/// File stem for a tensor name, e.g. "sme.pyramid_kernels[0]" -> "sme.pyramid_kernels_0_".
std::string tensor_file_stem(const std::string& name);

/// `meta` is stored under "meta" in the manifest. Existing files are overwritten.
template <typename T>
void save_state(const std::filesystem::path& dir, const NamedTensors<T>& tensors, const nlohmann::json& meta = {});

/// Fills `tensors` in place; names and shapes must match the manifest exactly. Returns the meta block.
template <typename T>
nlohmann::json load_state(const std::filesystem::path& dir, const NamedTensors<T>& tensors);

/// Reads manifest.json without touching tensor files.
nlohmann::json read_state_manifest(const std::filesystem::path& dir);

template <typename T>
NamedTensors<T> named(const std::vector<Parameter<T>*>& params);

}  // namespace tsi
