#include "tsi/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include "tsi/state_io.hpp"
#include "tsi/tensor_io.hpp"

namespace tsi {

using nlohmann::json;

std::vector<std::int64_t> segment_sample(std::int64_t num_frames, const SamplerConfig& cfg, Rng& rng) {
  if (num_frames < 1) throw ShapeError("segment_sample: num_frames must be >= 1");
  if (cfg.segments < 1) throw ConfigError("segment_sample: segments must be >= 1");
  const std::int64_t l = num_frames, t = cfg.segments;
  std::vector<std::int64_t> out(t);
  for (std::int64_t i = 0; i < t; ++i) {
    const std::int64_t lo = i * l / t, hi = (i + 1) * l / t;
    if (hi > lo) {
      out[i] = cfg.mode == SampleMode::kCenter ? lo + (hi - lo) / 2 : lo + rng.integer(0, hi - lo - 1);
    } else {
      // Empty segment: the frame covering the segment's position.
      const double u = cfg.mode == SampleMode::kCenter ? 0.5 : rng.uniform();
      out[i] = std::min<std::int64_t>(l - 1, static_cast<std::int64_t>((static_cast<double>(i) + u) * l / t));
    }
  }
  return out;
}

std::vector<std::int64_t> segment_sample(std::int64_t num_frames, const SamplerConfig& cfg) {
  Rng rng(cfg.seed);
  return segment_sample(num_frames, cfg, rng);
}

double LrSchedule::at(std::int64_t epoch) const {
  double lr = base;
  for (const auto m : milestones)
    if (epoch >= m) lr *= gamma;
  return lr;
}

template <typename T>
void Sgd<T>::step(const std::vector<Parameter<T>*>& params, double lr) {
  if (velocity_.empty()) {
    for (auto* p : params) velocity_.emplace_back(p->value.shape());
  }
  if (velocity_.size() != params.size()) throw ContractError("sgd: parameter list changed between steps");
  const T mu = static_cast<T>(momentum_), lr_t = static_cast<T>(lr);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter<T>& p = *params[i];
    Tensor<T>& v = velocity_[i];
    if (v.shape() != p.value.shape()) throw ContractError("sgd: shape of " + p.name + " changed");
    const T wd = p.decay ? static_cast<T>(weight_decay_) : T(0);
    const bool has_grad = !p.grad.empty();
    for (std::size_t k = 0; k < v.numel(); ++k) {
      const T g = (has_grad ? p.grad[k] : T(0)) + wd * p.value[k];
      v[k] = mu * v[k] + g;
      p.value[k] -= lr_t * v[k];
    }
  }
}

template <typename T>
std::size_t count_top1(const Tensor<T>& scores, std::span<const int> labels) {
  const std::int64_t n = scores.dim(0), k = scores.dim(1);
  std::size_t hits = 0;
  for (std::int64_t b = 0; b < n; ++b) {
    const T* row = scores.raw() + b * k;
    bool best = true;
    for (std::int64_t c = 0; c < k; ++c) best = best && (c == labels[b] || row[c] < row[labels[b]]);
    hits += best;
  }
  return hits;
}

template <typename T>
T train_step(Model<T>& model, Sgd<T>& opt, const Tensor<T>& clips, std::span<const int> labels, double lr,
             std::size_t* correct) {
  auto params = model.parameters();
  for (auto* p : params) p->zero_grad();
  T loss_value;
  {
    Tape<T> tape;
    auto scores = model_forward(tape.constant(clips), model, ops::NormMode::kTrain);
    if (correct) *correct = count_top1(scores.value(), labels);
    auto loss = ops::cross_entropy(scores, labels);
    loss_value = loss.value().item();
    if (!std::isfinite(loss_value)) {
      throw NumericalError("non-finite training loss (" + std::to_string(loss_value) + ")");
    }
    tape.backward(loss);
  }
  opt.step(params, lr);
  return loss_value;
}

Tensor<float> make_batch(const synth::ClipSet& data, const std::vector<std::size_t>& indices, const SamplerConfig& cfg,
                         Rng& rng) {
  if (indices.empty()) throw ShapeError("make_batch: empty batch");
  const Shape& cs = data.clips[indices.front()].shape();
  const std::int64_t t = cfg.segments, frame = cs[1] * cs[2] * cs[3];
  Tensor<float> batch(Shape{static_cast<std::int64_t>(indices.size()), t, cs[1], cs[2], cs[3]});
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const Tensor<float>& clip = data.clips[indices[b]];
    if (clip.shape() != cs) throw ShapeError("make_batch: clips have differing shapes");
    const auto frames = segment_sample(cs[0], cfg, rng);
    for (std::int64_t i = 0; i < t; ++i) {
      std::copy_n(clip.raw() + frames[i] * frame, frame, batch.raw() + (static_cast<std::int64_t>(b) * t + i) * frame);
    }
  }
  return batch;
}

EvalResult evaluate(Model<float>& model, const synth::ClipSet& data, std::int64_t batch_size) {
  if (data.num_classes() != model.spec.num_classes) {
    throw ConfigError("evaluate: dataset has " + std::to_string(data.num_classes()) + " classes, model has " +
                      std::to_string(model.spec.num_classes));
  }
  EvalResult r;
  if (data.size() == 0) return r;
  const SamplerConfig sampler{model.spec.frames, SampleMode::kCenter, 0};
  Rng rng(0);
  const std::int64_t k = model.spec.num_classes, top = std::min<std::int64_t>(5, k);
  std::size_t hit1 = 0, hit5 = 0;
  double loss_sum = 0.0;
  for (std::size_t start = 0; start < data.size(); start += static_cast<std::size_t>(batch_size)) {
    std::vector<std::size_t> idx(std::min<std::size_t>(batch_size, data.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    Tape<float> tape;
    NoGradGuard<float> guard(tape);
    auto scores = model_forward(tape.constant(make_batch(data, idx, sampler, rng)), model, ops::NormMode::kEval);
    std::vector<int> labels;
    for (auto i : idx) labels.push_back(data.labels[i]);
    loss_sum += ops::cross_entropy(scores, labels).value().item() * static_cast<double>(idx.size());
    const Tensor<float>& s = scores.value();
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const float* row = s.raw() + b * k;
      const int y = labels[b];
      std::int64_t rank = 0;
      for (std::int64_t c = 0; c < k; ++c) {
        // Ties count against the prediction so constant scores never look correct.
        if (c != y && row[c] >= row[y]) ++rank;
      }
      hit1 += rank == 0;
      hit5 += rank < top;
    }
  }
  r.count = data.size();
  r.top1 = static_cast<double>(hit1) / r.count;
  r.top5 = static_cast<double>(hit5) / r.count;
  r.loss = loss_sum / r.count;
  return r;
}

void TrainConfig::validate() const {
  model.validate();
  if (epochs < 0) throw ConfigError("train: epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (!(lr.base >= 0.0)) throw ConfigError("train: learning rate must be >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("train: momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("train: weight decay must be >= 0");
}

json TrainConfig::to_json() const {
  return {{"model", tsi::to_json(model)},
          {"data", data_dir},
          {"seed", seed},
          {"epochs", epochs},
          {"batch_size", batch_size},
          {"optimizer",
           {{"lr", lr.base},
            {"milestones", lr.milestones},
            {"gamma", lr.gamma},
            {"momentum", momentum},
            {"weight_decay", weight_decay}}},
          {"early_stop_top1", early_stop_top1}};
}

TrainConfig TrainConfig::from_json(const json& j, const std::filesystem::path& base_dir) {
  try {
    for (const auto& [k, v] : j.items()) {
      static const std::set<std::string> allowed{"model",      "model_path", "data", "seed", "epochs",
                                                 "batch_size", "optimizer",  "early_stop_top1"};
      if (!allowed.count(k)) throw ConfigError("train config: unknown key '" + k + "'");
    }
    TrainConfig c;
    if (j.contains("model")) {
      c.model = model_spec_from_json(j.at("model"));
    } else if (j.contains("model_path")) {
      std::filesystem::path p = j.at("model_path").get<std::string>();
      if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
      c.model = load_model_spec(p.string());
    } else {
      throw ConfigError("train config: 'model' or 'model_path' is required");
    }
    if (j.contains("data")) c.data_dir = j.at("data").get<std::string>();
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("epochs")) c.epochs = j.at("epochs").get<std::int64_t>();
    if (j.contains("batch_size")) c.batch_size = j.at("batch_size").get<std::int64_t>();
    if (j.contains("early_stop_top1")) c.early_stop_top1 = j.at("early_stop_top1").get<double>();
    if (j.contains("optimizer")) {
      const json& o = j.at("optimizer");
      for (const auto& [k, v] : o.items()) {
        static const std::set<std::string> allowed{"lr", "milestones", "gamma", "momentum", "weight_decay"};
        if (!allowed.count(k)) throw ConfigError("train config: unknown optimizer key '" + k + "'");
      }
      if (o.contains("lr")) c.lr.base = o.at("lr").get<double>();
      if (o.contains("milestones")) c.lr.milestones = o.at("milestones").get<std::vector<std::int64_t>>();
      if (o.contains("gamma")) c.lr.gamma = o.at("gamma").get<double>();
      if (o.contains("momentum")) c.momentum = o.at("momentum").get<double>();
      if (o.contains("weight_decay")) c.weight_decay = o.at("weight_decay").get<double>();
    }
    c.validate();
    return c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
}

TrainConfig TrainConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open train config " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("train config " + path.string() + ": " + e.what());
  }
  return from_json(j, path.parent_path());
}

std::string TrainConfig::hash() const { return fnv1a_hex(to_json().dump()); }

void save_checkpoint(const std::filesystem::path& dir, Model<float>& model, const json& meta) {
  json m = meta;
  m["model"] = to_json(model.spec);
  NamedTensors<float> tensors;
  for (auto& [name, t] : model.state()) tensors.emplace_back(name, t);
  save_state(dir, tensors, m);
}

Model<float> load_checkpoint(const std::filesystem::path& dir, json* meta) {
  const json manifest = read_state_manifest(dir);
  const json& m = manifest.at("meta");
  Model<float> model = Model<float>::init(model_spec_from_json(m.at("model")), 0);
  NamedTensors<float> tensors;
  for (auto& [name, t] : model.state()) tensors.emplace_back(name, t);
  json loaded = load_state(dir, tensors);
  if (meta) *meta = loaded;
  return model;
}

TrainResult train(const TrainConfig& cfg, const synth::ClipSet& train_set, const synth::ClipSet& val_set,
                  const TrainOutputs& outputs) {
  cfg.validate();
  if (train_set.num_classes() != cfg.model.num_classes) {
    throw ConfigError("train: dataset has " + std::to_string(train_set.num_classes()) + " classes, model has " +
                      std::to_string(cfg.model.num_classes));
  }
  if (train_set.size() == 0 && cfg.epochs > 0) throw ConfigError("train: empty training split");

  std::ofstream metrics_file;
  const bool to_disk = !outputs.dir.empty();
  if (to_disk) {
    std::filesystem::create_directories(outputs.dir);
    std::ofstream(outputs.dir / "config.json") << cfg.to_json().dump(1) << "\n";
    metrics_file.open(outputs.dir / "metrics.jsonl");
    if (!metrics_file) throw IoError("cannot write " + (outputs.dir / "metrics.jsonl").string());
  }
  TrainResult result;
  auto emit = [&](json rec) {
    if (to_disk) metrics_file << rec.dump() << "\n";
    if (outputs.on_metric) outputs.on_metric(rec);
    result.metrics.push_back(std::move(rec));
  };

  Model<float> model = Model<float>::init(cfg.model, cfg.seed);
  Sgd<float> opt(cfg.momentum, cfg.weight_decay);
  const std::string config_hash = cfg.hash();
  auto checkpoint = [&](std::int64_t epoch, double top1) {
    if (to_disk) {
      save_checkpoint(outputs.dir / "checkpoint", model,
                      {{"config_hash", config_hash}, {"epoch", epoch}, {"val_top1", top1}, {"seed", cfg.seed}});
    }
  };
  if (cfg.epochs == 0) checkpoint(0, 0.0);

  const SamplerConfig sampler{cfg.model.frames, SampleMode::kRandom, cfg.seed};
  std::int64_t step = 0;
  result.best_val_top1 = -1.0;
  for (std::int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng(mix_seed(cfg.seed, 0xe90c + static_cast<std::uint64_t>(epoch)));
    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order);
    const double lr = cfg.lr.at(epoch);
    double loss_sum = 0.0;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<std::size_t> idx(order.begin() + start, order.begin() + end);
      // BN needs more than one sample per channel; a trailing singleton batch is dropped.
      if (idx.size() * static_cast<std::size_t>(cfg.model.frames) < 2) continue;
      std::vector<int> labels;
      for (auto i : idx) labels.push_back(train_set.labels[i]);
      std::size_t hits = 0;
      const float loss = train_step(model, opt, make_batch(train_set, idx, sampler, rng), labels, lr, &hits);
      ++step;
      loss_sum += loss * static_cast<double>(idx.size());
      seen += idx.size();
      emit({{"step", step}, {"epoch", epoch + 1}, {"split", "train"}, {"loss", loss},
            {"top1", static_cast<double>(hits) / idx.size()}, {"lr", lr}});
    }
    result.final_train_loss = seen ? loss_sum / seen : 0.0;
    const EvalResult ev = evaluate(model, val_set);
    emit({{"step", step}, {"epoch", epoch + 1}, {"split", "val"}, {"loss", ev.loss}, {"top1", ev.top1}, {"top5", ev.top5}});
    result.epochs_run = epoch + 1;
    if (ev.top1 > result.best_val_top1) {
      result.best_val_top1 = ev.top1;
      result.best_epoch = epoch + 1;
      checkpoint(epoch + 1, ev.top1);
    }
    if (cfg.early_stop_top1 > 0.0 && ev.top1 >= cfg.early_stop_top1) break;
  }
  if (result.best_val_top1 < 0.0) result.best_val_top1 = 0.0;
  return result;
}

template class Sgd<float>;
template class Sgd<double>;
template float train_step<float>(Model<float>&, Sgd<float>&, const Tensor<float>&, std::span<const int>, double,
                                  std::size_t*);
template double train_step<double>(Model<double>&, Sgd<double>&, const Tensor<double>&, std::span<const int>, double,
                                    std::size_t*);
template std::size_t count_top1<float>(const Tensor<float>&, std::span<const int>);
template std::size_t count_top1<double>(const Tensor<double>&, std::span<const int>);

}  // namespace tsi
