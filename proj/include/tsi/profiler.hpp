#pragma once

// Analytical cost model. Headline numbers count multiply-accumulates (1 MAC =
// 1 FLOP); elementwise, normalization, pooling and softmax work is reported in
// a separate non-MAC column.

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "tsi/net.hpp"

namespace tsi::profile {

/// One layer application. Fields not used by a kind stay zero.
struct LayerDesc {
  std::string name;
  /// conv2d | conv1d | fc | matmul | batch_norm | relu | sigmoid | softmax | add | sub | mul | scale | gap | max_pool
  std::string kind;
  std::int64_t batch = 0;  // images (conv2d, max_pool), rows (conv1d, fc), matrices (matmul)
  std::int64_t in_channels = 0;
  std::int64_t out_channels = 0;
  std::int64_t height = 0;  // input spatial size
  std::int64_t width = 0;
  std::int64_t kernel = 1;
  std::int64_t stride = 1;
  std::int64_t padding = 0;
  std::int64_t groups = 1;
  bool bias = false;
  std::int64_t length = 0;  // conv1d sequence length
  std::int64_t m = 0, k = 0, n = 0;  // matmul [m,k] x [k,n]
  std::int64_t elements = 0;         // input elements of elementwise kinds
  std::int64_t channels = 0;         // batch_norm affine width
  /// Attribution tag: "backbone", "sme", "sme.alignment", "cti", "fusion", "head".
  std::string group = "backbone";
};

struct LayerRecord {
  std::string name;
  std::string kind;
  std::string group;
  std::vector<std::int64_t> output_shape;
  std::int64_t macs = 0;
  std::int64_t params = 0;
  std::int64_t other_ops = 0;
};

struct FlopReport {
  std::string model;
  std::int64_t frames = 0;
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::vector<LayerRecord> layers;
  std::int64_t total_macs = 0;
  std::int64_t total_params = 0;
  std::int64_t total_other_ops = 0;

  /// Sum of MACs over layers whose group matches `prefix` exactly or as "prefix.".
  std::int64_t macs_in(const std::string& prefix) const;
  nlohmann::json to_json() const;
  static FlopReport from_json(const nlohmann::json& j);
};

inline constexpr const char* kConventionNote =
    "MACs: 1 multiply-accumulate = 1 FLOP; non-MAC ops (elementwise, normalization, pooling, softmax) counted separately";

/// Throws ConfigError listing every unsupported kind.
FlopReport count_layers(const std::vector<LayerDesc>& layers);

/// Layer sequence executed by model_forward for one clip of `frames` x H x W.
std::vector<LayerDesc> describe_model(const ModelSpec& spec, std::int64_t frames, std::int64_t height,
                                      std::int64_t width);

FlopReport count_model(const ModelSpec& spec, std::int64_t frames, std::int64_t height, std::int64_t width);

std::string render_text(const FlopReport& report);
std::string render_json(const FlopReport& report);

}  // namespace tsi::profile
