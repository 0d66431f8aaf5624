#include "tsi/ablate.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>

#include <fmt/format.h>

namespace tsi {

using nlohmann::json;

AblationConfig AblationConfig::from_json(const json& j, const std::filesystem::path& base_dir) {
  static const std::set<std::string> allowed{"base", "base_path", "seeds", "variants"};
  for (const auto& [k, v] : j.items())
    if (!allowed.count(k)) throw ConfigError("ablation config: unknown key '" + k + "'");
  AblationConfig c;
  try {
    if (j.contains("base")) {
      c.base = TrainConfig::from_json(j.at("base"), base_dir);
    } else if (j.contains("base_path")) {
      std::filesystem::path p = j.at("base_path").get<std::string>();
      if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
      c.base = TrainConfig::load(p);
    } else {
      throw ConfigError("ablation config: 'base' or 'base_path' is required");
    }
    if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    if (j.contains("variants")) {
      std::set<std::string> names;
      for (const auto& v : j.at("variants")) {
        AblationVariant a;
        a.name = v.at("name").get<std::string>();
        if (v.contains("patch")) a.patch = v.at("patch");
        if (a.name.empty() || a.name.find('/') != std::string::npos)
          throw ConfigError("ablation config: variant names must be non-empty without '/'");
        // Duplicate names would share an output directory.
        if (!names.insert(a.name).second) throw ConfigError("ablation config: duplicate variant '" + a.name + "'");
        c.variants.push_back(std::move(a));
      }
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("ablation config: ") + e.what());
  }
  if (c.seeds.empty() && !c.variants.empty()) throw ConfigError("ablation config: 'seeds' must not be empty");
  for (const auto& v : c.variants) c.resolve(v, c.seeds.front());
  return c;
}

AblationConfig AblationConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return from_json(j, path.parent_path());
}

json AblationConfig::to_json() const {
  json vs = json::array();
  for (const auto& v : variants) vs.push_back({{"name", v.name}, {"patch", v.patch}});
  return {{"base", base.to_json()}, {"seeds", seeds}, {"variants", vs}};
}

TrainConfig AblationConfig::resolve(const AblationVariant& variant, std::uint64_t seed) const {
  json j = base.to_json();
  j.merge_patch(variant.patch);
  j["seed"] = seed;
  TrainConfig c = TrainConfig::from_json(j);
  c.validate();
  return c;
}

json AblationRow::to_json() const {
  return {{"name", name},
          {"seed", seed},
          {"best_val_top1", best_val_top1},
          {"best_epoch", best_epoch},
          {"epochs_run", epochs_run},
          {"final_train_loss", final_train_loss}};
}

double median_top1(const std::vector<AblationRow>& rows, const std::string& name) {
  std::vector<double> v;
  for (const auto& r : rows)
    if (r.name == name) v.push_back(r.best_val_top1);
  if (v.empty()) throw ContractError("no ablation rows named '" + name + "'");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::vector<AblationRow> run_ablation(const AblationConfig& cfg, const synth::ClipSet& train_set,
                                      const synth::ClipSet& val_set, const std::filesystem::path& out_dir,
                                      const std::function<void(const AblationRow&)>& on_row) {
  std::vector<AblationRow> rows;
  for (const auto& variant : cfg.variants) {
    for (const auto seed : cfg.seeds) {
      const TrainConfig run = cfg.resolve(variant, seed);
      TrainOutputs outputs;
      if (!out_dir.empty()) outputs.dir = out_dir / variant.name / ("seed_" + std::to_string(seed));
      const TrainResult r = train(run, train_set, val_set, outputs);
      AblationRow row{variant.name, seed, r.best_val_top1, r.best_epoch, r.epochs_run, r.final_train_loss};
      if (on_row) on_row(row);
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

std::string render_ablation_table(const std::vector<AblationRow>& rows) {
  std::string out = fmt::format("{:<24} {:>8} {:>10} {:>10} {:>8} {:>12}\n", "config", "seed", "val_top1", "best_ep",
                                "epochs", "train_loss");
  std::vector<std::string> order;
  for (const auto& r : rows) {
    out += fmt::format("{:<24} {:>8} {:>10.4f} {:>10} {:>8} {:>12.5f}\n", r.name, r.seed, r.best_val_top1,
                       r.best_epoch, r.epochs_run, r.final_train_loss);
    if (std::find(order.begin(), order.end(), r.name) == order.end()) order.push_back(r.name);
  }
  if (!order.empty()) out += "\n";
  for (const auto& name : order) out += fmt::format("{:<24} {:>8} {:>10.4f}\n", name, "median", median_top1(rows, name));
  return out;
}

}  // namespace tsi
