#pragma once

// Ablation sweeps: one training run per (variant, seed) over shared data.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tsi/train.hpp"

namespace tsi {

struct AblationVariant {
  std::string name;
  /// JSON merge patch applied to the base training config, e.g. {"model": {"temporal": {"use_sme": false}}}.
  nlohmann::json patch = nlohmann::json::object();
};

struct AblationConfig {
  TrainConfig base;
  std::vector<std::uint64_t> seeds{0};
  std::vector<AblationVariant> variants;

  /// Keys: base (inline object) or base_path, seeds, variants[{name, patch}].
  static AblationConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
  static AblationConfig load(const std::filesystem::path& path);
  nlohmann::json to_json() const;
  /// Resolved config of one run.
  TrainConfig resolve(const AblationVariant& variant, std::uint64_t seed) const;
};

struct AblationRow {
  std::string name;
  std::uint64_t seed = 0;
  double best_val_top1 = 0.0;
  std::int64_t best_epoch = 0;
  std::int64_t epochs_run = 0;
  double final_train_loss = 0.0;

  nlohmann::json to_json() const;
};

/// Median over the rows named `name`; throws ContractError if there are none.
double median_top1(const std::vector<AblationRow>& rows, const std::string& name);

/// Runs every variant for every seed. With a non-empty `out_dir` each run writes
/// to out_dir/<name>/seed_<seed>. `on_row` fires after each run.
std::vector<AblationRow> run_ablation(const AblationConfig& cfg, const synth::ClipSet& train_set,
                                      const synth::ClipSet& val_set, const std::filesystem::path& out_dir = {},
                                      const std::function<void(const AblationRow&)>& on_row = {});

/// Per-run rows followed by one median line per variant.
std::string render_ablation_table(const std::vector<AblationRow>& rows);

}  // namespace tsi
