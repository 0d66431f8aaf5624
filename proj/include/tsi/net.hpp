#pragma once

// Bottleneck blocks with optional temporal modules, and the backbone that
// stacks them. Features flow as [N*T, C, H, W]; SME and CTI unfold T internally.
//
//   x -> 1x1 -> BN -> ReLU -> 3x3(stride) -> BN -> ReLU -> [SME / CTI] -> 1x1 -> BN -> (+ shortcut) -> ReLU

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "tsi/autograd.hpp"
#include "tsi/cti.hpp"
#include "tsi/ops.hpp"
#include "tsi/sme.hpp"

namespace tsi {

enum class Fusion { kCascade, kSummation, kConcatenation };

struct BlockConfig {
  std::int64_t in_channels = 0;
  std::int64_t bottleneck_channels = 0;
  std::int64_t out_channels = 0;
  std::int64_t stride = 1;
  std::int64_t frames = 1;
  bool use_sme = true;
  bool use_cti = true;
  Fusion fusion = Fusion::kCascade;
  /// channels fields are overwritten with bottleneck_channels by validate().
  SmeConfig sme;
  CtiConfig cti;
  bool batch_norm = true;

  bool has_projection() const { return stride != 1 || in_channels != out_channels; }
  /// Throws ConfigError; fills the module channel counts.
  void validate();
};

template <typename T>
struct NormParams {
  Parameter<T> gamma;
  Parameter<T> beta;
  ops::BatchNormStats<T> stats;

  static NormParams init(std::int64_t channels, const std::string& prefix);
};

template <typename T>
struct BlockParams {
  Parameter<T> conv1;  // [B, Cin, 1, 1]
  Parameter<T> conv2;  // [B, B, 3, 3]
  Parameter<T> conv3;  // [Cout, B, 1, 1]
  NormParams<T> bn1, bn2, bn3;
  Parameter<T> shortcut;  // [Cout, Cin, 1, 1], projection blocks only
  NormParams<T> bn_shortcut;
  std::optional<SmeParams<T>> sme;
  std::optional<CtiParams<T>> cti;
  Parameter<T> sme_merge;  // [B/2, B, 1, 1], concatenation fusion only
  Parameter<T> cti_merge;

  static BlockParams init(const BlockConfig& cfg, Rng& rng, const std::string& prefix);
  std::vector<Parameter<T>*> parameters();
  /// Learnable tensors followed by normalization running statistics, all named.
  std::vector<std::pair<std::string, Tensor<T>*>> state();
};

/// SME/CTI section of a block on h[N*T, B, H, W], per the configured fusion.
template <typename T>
Var<T> temporal_section(const Var<T>& h, BlockParams<T>& p, const BlockConfig& cfg);

template <typename T>
Var<T> block_forward(const Var<T>& x, BlockParams<T>& p, const BlockConfig& cfg, ops::NormMode mode);

struct StageSpec {
  std::int64_t blocks = 1;
  std::int64_t out_channels = 0;
  std::int64_t bottleneck_channels = 0;
  std::int64_t stride = 1;
  /// Per-block temporal-module switch; empty means every block is a TSI block.
  std::vector<bool> tsi;
};

struct ModelSpec {
  std::string name = "model";
  std::int64_t frames = 8;
  std::int64_t in_channels = 3;
  std::int64_t num_classes = 4;

  std::int64_t stem_channels = 32;
  std::int64_t stem_kernel = 3;
  std::int64_t stem_stride = 1;
  bool stem_pool = false;
  std::int64_t pool_kernel = 2;
  std::int64_t pool_stride = 2;
  std::int64_t pool_padding = 0;

  std::vector<StageSpec> stages;

  bool use_sme = true;
  bool use_cti = true;
  Fusion fusion = Fusion::kCascade;
  bool batch_norm = true;
  SmeConfig sme;  // channels ignored
  CtiConfig cti;  // channels ignored

  /// Expanded, validated per-block configs in execution order.
  std::vector<BlockConfig> block_configs() const;
  std::int64_t feature_channels() const;
  void validate() const;
};

nlohmann::json to_json(const ModelSpec& spec);
/// Unknown keys are rejected so typos in ablation toggles surface.
ModelSpec model_spec_from_json(const nlohmann::json& j);
ModelSpec load_model_spec(const std::string& path);

std::string fusion_name(Fusion f);
Fusion parse_fusion(const std::string& s);
std::string alignment_name(AlignmentOp op);
AlignmentOp parse_alignment(const std::string& s);
std::string motion_name(MotionMode m);
MotionMode parse_motion(const std::string& s);
std::string integration_name(IntegrationMode m);
IntegrationMode parse_integration(const std::string& s);

template <typename T>
struct Model {
  ModelSpec spec;
  Parameter<T> stem;  // [S, Cin, k, k]
  NormParams<T> stem_bn;
  std::vector<BlockConfig> configs;
  std::vector<BlockParams<T>> blocks;
  Parameter<T> fc_weight;  // [K, F]
  Parameter<T> fc_bias;    // [K]

  static Model init(const ModelSpec& spec, std::uint64_t seed);
  std::vector<Parameter<T>*> parameters();
  /// Every persistent tensor (parameters and running statistics) with a unique name.
  std::vector<std::pair<std::string, Tensor<T>*>> state();
  std::size_t parameter_count();
};

/// clips[N, T, C, H, W] -> class scores [N, K], averaging per-frame logits over T.
template <typename T>
Var<T> model_forward(const Var<T>& clips, Model<T>& model, ops::NormMode mode);

}  // namespace tsi
