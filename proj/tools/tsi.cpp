// tsi: dataset generation, training, evaluation, gradient checks, profiling and ablations.
//
// Exit codes: 0 success, 1 usage error, 2 validation or check failure, 3 numerical failure.

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <json.hpp>

#include "tsi/ablate.hpp"
#include "tsi/gradcheck_suites.hpp"
#include "tsi/profiler.hpp"
#include "tsi/synth.hpp"
#include "tsi/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kOk = 0;
constexpr int kUsage = 1;
constexpr int kValidation = 2;
constexpr int kNumerical = 3;

/// Raised for bad flag combinations detected after parsing.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw tsi::IoError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw tsi::ConfigError(path.string() + ": " + e.what());
  }
}

/// --out, else $TSI_OUTPUT_DIR/<fallback>, else ./runs/<fallback>.
fs::path output_dir(const std::string& flag, const std::string& fallback) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("TSI_OUTPUT_DIR"); env && *env) return fs::path(env) / fallback;
  return fs::path("runs") / fallback;
}

struct GenDataArgs {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::int64_t> clips_per_class;
  std::optional<std::int64_t> jitter;
};

int cmd_gen_data(const GenDataArgs& a) {
  json j = a.config.empty() ? json::object() : read_json(a.config);
  tsi::synth::DatasetConfig cfg = tsi::synth::DatasetConfig::from_json(j);
  if (a.seed) cfg.seed = *a.seed;
  if (a.clips_per_class) cfg.clips_per_class = *a.clips_per_class;
  if (a.jitter) cfg.camera_jitter = *a.jitter;
  cfg.validate();
  const fs::path out = output_dir(a.out, "data");
  const auto built = tsi::synth::build_dataset(cfg, out);
  fmt::print("wrote {} train / {} val clips to {}\n", built.train.entries.size(), built.val.entries.size(),
             out.string());
  return kOk;
}

struct TrainArgs {
  std::string config;
  std::string data;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::int64_t> epochs;
  std::optional<double> lr;
  bool quiet = false;
};

int cmd_train(const TrainArgs& a) {
  tsi::TrainConfig cfg = tsi::TrainConfig::load(a.config);
  if (!a.data.empty()) cfg.data_dir = a.data;
  if (a.seed) cfg.seed = *a.seed;
  if (a.epochs) cfg.epochs = *a.epochs;
  if (a.lr) cfg.lr.base = *a.lr;
  cfg.validate();
  if (cfg.data_dir.empty()) throw UsageError("train: no dataset (set 'data' in the config or pass --data)");

  const auto train_set = tsi::synth::load_split(cfg.data_dir, "train");
  const auto val_set = tsi::synth::load_split(cfg.data_dir, "val");
  tsi::TrainOutputs outputs;
  outputs.dir = output_dir(a.out, "train");
  if (!a.quiet) {
    outputs.on_metric = [](const json& m) {
      if (m.value("split", "") == "val")
        fmt::print(stderr, "epoch {:>3}  val top1 {:.4f}  top5 {:.4f}  loss {:.4f}\n", m.at("epoch").get<int>(),
                   m.at("top1").get<double>(), m.at("top5").get<double>(), m.at("loss").get<double>());
    };
  }
  const tsi::TrainResult r = tsi::train(cfg, train_set, val_set, outputs);
  fmt::print("best val top1 {:.4f} at epoch {} ({} epochs run); outputs in {}\n", r.best_val_top1, r.best_epoch,
             r.epochs_run, outputs.dir.string());
  return kOk;
}

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::string split = "val";
  bool json_out = false;
};

int cmd_eval(const EvalArgs& a) {
  tsi::Model<float> model = tsi::load_checkpoint(a.checkpoint);
  const auto set = tsi::synth::load_split(a.data, a.split);
  const tsi::EvalResult r = tsi::evaluate(model, set);
  if (a.json_out) {
    std::cout << json{{"split", a.split}, {"count", r.count}, {"top1", r.top1}, {"top5", r.top5}, {"loss", r.loss}}.dump()
              << "\n";
  } else {
    fmt::print("{} clips={} top1={:.4f} top5={:.4f} loss={:.5f}\n", a.split, r.count, r.top1, r.top5, r.loss);
  }
  return kOk;
}

struct GradcheckArgs {
  std::string module = "all";
  std::string corrupt;
  double corrupt_factor = 1.5;
  std::uint64_t seed = 0;
  std::size_t samples = 0;
  double step = 1e-5;
  double tolerance = 1e-4;
  bool verbose = false;
};

int cmd_gradcheck(const GradcheckArgs& a) {
  tsi::GradCheckOptions o;
  o.seed = a.seed;
  o.max_samples = a.samples;
  o.step = a.step;
  o.tolerance = a.tolerance;
  if (!a.corrupt.empty()) tsi::debug::set_corrupted_adjoint(a.corrupt, a.corrupt_factor);
  const auto results = tsi::run_gradcheck_suite(a.module, o);
  bool ok = true;
  for (const auto& r : results) {
    ok = ok && r.report.passed();
    fmt::print("{:<36} {}  max rel err {:.3e}\n", r.name, r.report.passed() ? "PASS" : "FAIL",
               r.report.max_rel_error());
    if (a.verbose || !r.report.passed()) std::cout << r.report.to_string();
  }
  fmt::print("{} of {} checks passed\n",
             std::count_if(results.begin(), results.end(), [](const auto& r) { return r.report.passed(); }),
             results.size());
  return ok ? kOk : kValidation;
}

struct ProfileArgs {
  std::string model;
  std::optional<std::int64_t> frames;
  std::int64_t size = 224;
  bool json_out = false;
};

int cmd_profile(const ProfileArgs& a) {
  const tsi::ModelSpec spec = tsi::load_model_spec(a.model);
  const auto report = tsi::profile::count_model(spec, a.frames.value_or(spec.frames), a.size, a.size);
  std::cout << (a.json_out ? tsi::profile::render_json(report) : tsi::profile::render_text(report));
  return kOk;
}

struct AblateArgs {
  std::string config;
  std::string data;
  std::string out;
  bool json_out = false;
};

int cmd_ablate(const AblateArgs& a) {
  tsi::AblationConfig cfg = tsi::AblationConfig::load(a.config);
  if (!a.data.empty()) cfg.base.data_dir = a.data;
  const fs::path out = output_dir(a.out, "ablate");
  std::vector<tsi::AblationRow> rows;
  if (!cfg.variants.empty()) {
    if (cfg.base.data_dir.empty()) throw UsageError("ablate: no dataset (set base.data or pass --data)");
    const auto train_set = tsi::synth::load_split(cfg.base.data_dir, "train");
    const auto val_set = tsi::synth::load_split(cfg.base.data_dir, "val");
    fs::create_directories(out);
    std::ofstream(out / "ablation.json") << cfg.to_json().dump(2) << "\n";
    rows = tsi::run_ablation(cfg, train_set, val_set, out, [](const tsi::AblationRow& r) {
      fmt::print(stderr, "{} seed {}: val top1 {:.4f}\n", r.name, r.seed, r.best_val_top1);
    });
  }
  if (a.json_out) {
    json j = json::array();
    for (const auto& r : rows) j.push_back(r.to_json());
    std::cout << j.dump() << "\n";
  } else {
    std::cout << tsi::render_ablation_table(rows);
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tsi: temporal video network toolkit"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* c_gen = app.add_subcommand("gen-data", "Generate a synthetic moving-shape dataset");
  c_gen->add_option("--config", gen.config, "Dataset config JSON (defaults when omitted)")->check(CLI::ExistingFile);
  c_gen->add_option("--out", gen.out, "Output directory");
  c_gen->add_option("--seed", gen.seed, "Override the global seed");
  c_gen->add_option("--clips-per-class", gen.clips_per_class, "Override clips per class");
  c_gen->add_option("--jitter", gen.jitter, "Override camera jitter amplitude (px per frame)");

  TrainArgs tr;
  auto* c_train = app.add_subcommand("train", "Train a model on a generated dataset");
  c_train->add_option("--config", tr.config, "Training config JSON")->required()->check(CLI::ExistingFile);
  c_train->add_option("--data", tr.data, "Dataset directory (overrides the config)");
  c_train->add_option("--out", tr.out, "Output directory");
  c_train->add_option("--seed", tr.seed, "Override the seed");
  c_train->add_option("--epochs", tr.epochs, "Override the epoch count");
  c_train->add_option("--lr", tr.lr, "Override the base learning rate");
  c_train->add_flag("--quiet", tr.quiet, "No per-epoch progress");

  EvalArgs ev;
  auto* c_eval = app.add_subcommand("eval", "Single-view evaluation of a checkpoint");
  c_eval->add_option("--checkpoint", ev.checkpoint, "Checkpoint directory")->required()->check(CLI::ExistingDirectory);
  c_eval->add_option("--data", ev.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  c_eval->add_option("--split", ev.split, "train or val")->check(CLI::IsMember({"train", "val"}));
  c_eval->add_flag("--json", ev.json_out, "Machine-readable output");

  GradcheckArgs gc;
  auto* c_gc = app.add_subcommand("gradcheck", "Central-difference gradient checks in 64-bit");
  c_gc->add_option("--module", gc.module, "primitives|sme|cti|block|model|all")
      ->check(CLI::IsMember({"primitives", "sme", "cti", "block", "model", "all"}));
  c_gc->add_option("--corrupt-adjoint", gc.corrupt, "Scale the backward pass of this op (negative test)");
  c_gc->add_option("--corrupt-factor", gc.corrupt_factor, "Scale applied by --corrupt-adjoint");
  c_gc->add_option("--seed", gc.seed, "Seed for inputs and sampled elements");
  c_gc->add_option("--samples", gc.samples, "Elements checked per parameter (0 = all)");
  c_gc->add_option("--step", gc.step, "Finite-difference step");
  c_gc->add_option("--tolerance", gc.tolerance, "Relative error tolerance");
  c_gc->add_flag("-v,--verbose", gc.verbose, "Print per-parameter errors");

  ProfileArgs pf;
  auto* c_prof = app.add_subcommand("profile", "Analytical MAC and parameter count");
  c_prof->add_option("--model", pf.model, "Model spec JSON")->required()->check(CLI::ExistingFile);
  c_prof->add_option("--frames", pf.frames, "Frames per clip (default: the spec's)");
  c_prof->add_option("--size", pf.size, "Square input resolution");
  c_prof->add_flag("--json", pf.json_out, "Machine-readable output");

  AblateArgs ab;
  auto* c_ab = app.add_subcommand("ablate", "Train every variant for every seed and tabulate");
  c_ab->add_option("--config", ab.config, "Ablation config JSON")->required()->check(CLI::ExistingFile);
  c_ab->add_option("--data", ab.data, "Dataset directory (overrides the base config)");
  c_ab->add_option("--out", ab.out, "Output directory");
  c_ab->add_flag("--json", ab.json_out, "Machine-readable rows");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*c_gen) return cmd_gen_data(gen);
    if (*c_train) return cmd_train(tr);
    if (*c_eval) return cmd_eval(ev);
    if (*c_gc) return cmd_gradcheck(gc);
    if (*c_prof) return cmd_profile(pf);
    if (*c_ab) return cmd_ablate(ab);
  } catch (const UsageError& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return kUsage;
  } catch (const tsi::NumericalError& e) {
    fmt::print(stderr, "numerical failure: {}\n", e.what());
    return kNumerical;
  } catch (const std::exception& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return kValidation;
  }
  return kUsage;
}
