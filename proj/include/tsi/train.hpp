#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "tsi/net.hpp"
#include "tsi/rng.hpp"
#include "tsi/synth.hpp"

namespace tsi {

enum class SampleMode { kRandom, kCenter };

struct SamplerConfig {
  std::int64_t segments = 8;
  SampleMode mode = SampleMode::kRandom;
  std::uint64_t seed = 0;
};

/// One frame index per equal segment [floor(iL/T), floor((i+1)L/T)). Random mode
/// draws from `rng`; center mode takes segment midpoints. Nondecreasing; when
/// L < T segments share frames.
std::vector<std::int64_t> segment_sample(std::int64_t num_frames, const SamplerConfig& cfg, Rng& rng);
/// Same, with a generator seeded from cfg.seed.
std::vector<std::int64_t> segment_sample(std::int64_t num_frames, const SamplerConfig& cfg);

struct LrSchedule {
  double base = 0.01;
  std::vector<std::int64_t> milestones;  // epochs at which the rate is multiplied by gamma
  double gamma = 0.1;

  double at(std::int64_t epoch) const;
};

/// SGD with momentum: v = mu*v + (g + wd*w), w -= lr*v. Weight decay only on
/// parameters flagged for it (conv and FC weights).
template <typename T>
class Sgd {
 public:
  Sgd(double momentum = 0.9, double weight_decay = 5e-4) : momentum_(momentum), weight_decay_(weight_decay) {}

  void step(const std::vector<Parameter<T>*>& params, double lr);
  const std::vector<Tensor<T>>& velocity() const { return velocity_; }

 private:
  double momentum_;
  double weight_decay_;
  std::vector<Tensor<T>> velocity_;
};

/// Forward, backward and update on one batch; returns the loss before the update.
/// Throws NumericalError on a non-finite loss. `correct` receives the batch top-1 hit count.
template <typename T>
T train_step(Model<T>& model, Sgd<T>& opt, const Tensor<T>& clips, std::span<const int> labels, double lr,
             std::size_t* correct = nullptr);

/// Rows of scores[N, K] whose label strictly beats every other class.
template <typename T>
std::size_t count_top1(const Tensor<T>& scores, std::span<const int> labels);

struct EvalResult {
  double top1 = 0.0;
  double top5 = 0.0;
  double loss = 0.0;
  std::size_t count = 0;
};

/// Single-view evaluation with center sampling and running normalization statistics.
EvalResult evaluate(Model<float>& model, const synth::ClipSet& data, std::int64_t batch_size = 16);

/// Stacks `indices` of `data` into [N, T, 3, H, W] using the sampler.
Tensor<float> make_batch(const synth::ClipSet& data, const std::vector<std::size_t>& indices, const SamplerConfig& cfg,
                         Rng& rng);

struct TrainConfig {
  ModelSpec model;
  std::string data_dir;
  std::uint64_t seed = 0;
  std::int64_t epochs = 30;
  std::int64_t batch_size = 8;
  LrSchedule lr;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  /// Stop once validation top-1 reaches this value; 0 disables.
  double early_stop_top1 = 0.0;

  void validate() const;
  nlohmann::json to_json() const;
  /// "model" may be inline or given as "model_path" (relative to `base_dir`).
  static TrainConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
  static TrainConfig load(const std::filesystem::path& path);
  /// FNV-1a of the canonical JSON.
  std::string hash() const;
};

struct TrainResult {
  double best_val_top1 = 0.0;
  std::int64_t best_epoch = 0;
  std::int64_t epochs_run = 0;
  double final_train_loss = 0.0;
  std::vector<nlohmann::json> metrics;
};

struct TrainOutputs {
  /// Directory receiving metrics.jsonl, config.json and checkpoint/; empty keeps everything in memory.
  std::filesystem::path dir;
  std::function<void(const nlohmann::json&)> on_metric;
};

/// Trains from the seed-determined initialization. The checkpoint holds the
/// weights with the best validation top-1; with zero epochs, the initialization.
TrainResult train(const TrainConfig& cfg, const synth::ClipSet& train_set, const synth::ClipSet& val_set,
                  const TrainOutputs& outputs = {});

void save_checkpoint(const std::filesystem::path& dir, Model<float>& model, const nlohmann::json& meta);
/// Rebuilds the model from the spec stored in the checkpoint and loads its state.
Model<float> load_checkpoint(const std::filesystem::path& dir, nlohmann::json* meta = nullptr);

}  // namespace tsi
