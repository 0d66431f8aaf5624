#include "tsi/gradcheck_suites.hpp"

#include <deque>
#include <functional>
#include <memory>

#include "tsi/cti.hpp"
#include "tsi/init.hpp"
#include "tsi/net.hpp"
#include "tsi/ops.hpp"
#include "tsi/sme.hpp"

namespace tsi {

namespace {

using P = Parameter<double>;
using V = Var<double>;
using Tp = Tape<double>;

/// Parameters of one check, kept at stable addresses.
struct Fixture {
  std::deque<P> params;
  Rng rng;

  explicit Fixture(std::uint64_t seed) : rng(seed) {}

  P& normal(const std::string& name, Shape s, double stddev = 1.0) {
    params.emplace_back(name, normal_tensor<double>(std::move(s), stddev, rng));
    return params.back();
  }
  /// Values bounded away from zero, for inputs that pass through kinks.
  P& away_from_zero(const std::string& name, Shape s) {
    P& p = normal(name, std::move(s));
    for (auto& v : p.value.data()) v = v >= 0 ? v + 0.2 : v - 0.2;
    return p;
  }
  std::vector<P*> all() {
    std::vector<P*> out;
    for (auto& p : params) out.push_back(&p);
    return out;
  }
};

/// sum(y * R) for a fixed random R, so every output element feeds the loss with a distinct weight.
V project(const V& y, std::uint64_t seed) {
  Rng rng(seed);
  return ops::sum(ops::mul(y, y.tape().constant(normal_tensor<double>(y.shape(), 1.0, rng))));
}

SuiteResult check(const std::string& name, Fixture& fx, const std::function<V(Tp&)>& f,
                  const GradCheckOptions& options) {
  return {name, grad_check(f, fx.all(), options)};
}

std::vector<SuiteResult> primitives(const GradCheckOptions& o) {
  std::vector<SuiteResult> out;
  const std::uint64_t s = o.seed;
  auto run = [&](const std::string& name, const std::function<void(Fixture&, std::function<V(Tp&)>&)>& setup) {
    auto fx = std::make_unique<Fixture>(mix_seed(s, std::hash<std::string>{}(name)));
    std::function<V(Tp&)> f;
    setup(*fx, f);
    out.push_back(check("primitive/" + name, *fx, f, o));
  };

  run("add", [](Fixture& fx, auto& f) {
    P& a = fx.normal("a", {2, 3, 4});
    P& b = fx.normal("b", {3, 1});
    f = [&a, &b](Tp& t) { return project(ops::add(t.param(a), t.param(b)), 1); };
  });
  run("sub", [](Fixture& fx, auto& f) {
    P& a = fx.normal("a", {2, 1, 4});
    P& b = fx.normal("b", {3, 4});
    f = [&a, &b](Tp& t) { return project(ops::sub(t.param(a), t.param(b)), 2); };
  });
  run("mul", [](Fixture& fx, auto& f) {
    P& a = fx.normal("a", {2, 3, 4});
    P& b = fx.normal("b", {1, 3, 1});
    f = [&a, &b](Tp& t) { return project(ops::mul(t.param(a), t.param(b)), 3); };
  });
  run("scale", [](Fixture& fx, auto& f) {
    P& a = fx.normal("a", {5, 3});
    f = [&a](Tp& t) { return project(ops::scale(t.param(a), -0.7), 4); };
  });
  run("relu", [](Fixture& fx, auto& f) {
    P& a = fx.away_from_zero("a", {4, 5});
    f = [&a](Tp& t) { return project(ops::relu(t.param(a)), 5); };
  });
  run("sigmoid", [](Fixture& fx, auto& f) {
    P& a = fx.normal("a", {4, 5}, 2.0);
    f = [&a](Tp& t) { return project(ops::sigmoid(t.param(a)), 6); };
  });
  run("softmax", [](Fixture& fx, auto& f) {
    P& a = fx.normal("a", {3, 4, 5}, 2.0);
    f = [&a](Tp& t) { return project(ops::softmax(t.param(a), 1), 7); };
  });
  run("sum", [](Fixture& fx, auto& f) {
    P& a = fx.normal("a", {3, 4});
    f = [&a](Tp& t) { return ops::sum(ops::mul(t.param(a), t.param(a))); };
  });
  run("mean", [](Fixture& fx, auto& f) {
    P& a = fx.normal("a", {3, 4});
    f = [&a](Tp& t) { return ops::mean(ops::mul(t.param(a), t.param(a))); };
  });
  run("mean_axis", [](Fixture& fx, auto& f) {
    P& a = fx.normal("a", {2, 3, 4});
    f = [&a](Tp& t) { return project(ops::mean_axis(t.param(a), 1), 8); };
  });
  run("reshape_permute", [](Fixture& fx, auto& f) {
    P& a = fx.normal("a", {2, 3, 4});
    f = [&a](Tp& t) { return project(ops::permute(ops::reshape(t.param(a), {6, 4}), {1, 0}), 9); };
  });
  run("slice_concat", [](Fixture& fx, auto& f) {
    P& a = fx.normal("a", {2, 6, 3});
    P& b = fx.normal("b", {2, 2, 3});
    f = [&a, &b](Tp& t) {
      auto x = t.param(a);
      return project(ops::concat<double>({ops::slice(x, 1, 4, 2), t.param(b), ops::slice(x, 1, 0, 3)}, 1), 10);
    };
  });
  run("matmul", [](Fixture& fx, auto& f) {
    P& a = fx.normal("a", {2, 1, 3, 4});
    P& b = fx.normal("b", {3, 4, 2});
    f = [&a, &b](Tp& t) { return project(ops::matmul(t.param(a), t.param(b)), 11); };
  });
  run("conv2d", [](Fixture& fx, auto& f) {
    P& x = fx.normal("x", {2, 4, 5, 5});
    P& w = fx.normal("w", {6, 4, 3, 3});
    f = [&x, &w](Tp& t) { return project(ops::conv2d(t.param(x), t.param(w), 2, 1), 12); };
  });
  run("conv2d_grouped", [](Fixture& fx, auto& f) {
    P& x = fx.normal("x", {2, 4, 5, 5});
    P& w = fx.normal("w", {6, 2, 3, 3});
    f = [&x, &w](Tp& t) { return project(ops::conv2d(t.param(x), t.param(w), 1, 1, 2), 13); };
  });
  run("conv2d_depthwise", [](Fixture& fx, auto& f) {
    P& x = fx.normal("x", {2, 3, 4, 4});
    P& w = fx.normal("w", {3, 1, 3, 3});
    f = [&x, &w](Tp& t) { return project(ops::conv2d(t.param(x), t.param(w), 1, 1, 3), 14); };
  });
  run("conv2d_pointwise", [](Fixture& fx, auto& f) {
    P& x = fx.normal("x", {2, 4, 3, 3});
    P& w = fx.normal("w", {5, 4, 1, 1});
    f = [&x, &w](Tp& t) { return project(ops::conv2d(t.param(x), t.param(w)), 15); };
  });
  run("conv1d_temporal", [](Fixture& fx, auto& f) {
    P& x = fx.normal("x", {3, 4, 5});
    P& w = fx.normal("w", {4, 3});
    f = [&x, &w](Tp& t) { return project(ops::conv1d_temporal(t.param(x), t.param(w)), 16); };
  });
  run("global_avg_pool_spatial", [](Fixture& fx, auto& f) {
    P& x = fx.normal("x", {2, 3, 4, 5});
    f = [&x](Tp& t) { return project(ops::global_avg_pool_spatial(t.param(x)), 17); };
  });
  run("fully_connected", [](Fixture& fx, auto& f) {
    P& x = fx.normal("x", {2, 3, 4});
    P& w = fx.normal("w", {5, 4});
    P& b = fx.normal("b", {5});
    f = [&x, &w, &b](Tp& t) { return project(ops::fully_connected(t.param(x), t.param(w), t.param(b)), 18); };
  });
  run("max_pool2d", [](Fixture& fx, auto& f) {
    P& x = fx.normal("x", {2, 2, 5, 5});
    f = [&x](Tp& t) { return project(ops::max_pool2d(t.param(x), 3, 2, 1), 19); };
  });
  run("batch_norm", [](Fixture& fx, auto& f) {
    P& x = fx.normal("x", {3, 4, 3, 3});
    P& g = fx.normal("gamma", {4});
    P& b = fx.normal("beta", {4});
    f = [&x, &g, &b](Tp& t) {
      ops::BatchNormStats<double> stats(4);
      return project(ops::batch_norm(t.param(x), t.param(g), t.param(b), stats, ops::NormMode::kTrain), 20);
    };
  });
  run("cross_entropy", [](Fixture& fx, auto& f) {
    P& logits = fx.normal("logits", {4, 5}, 2.0);
    f = [&logits](Tp& t) {
      static const std::vector<int> labels{0, 3, 4, 1};
      return ops::cross_entropy(t.param(logits), labels);
    };
  });
  return out;
}

void randomize(const std::vector<P*>& ps, Rng& rng, double stddev) {
  for (auto* p : ps)
    for (auto& v : p->value.data()) v = stddev * rng.normal();
}

std::vector<SuiteResult> sme_suite(const GradCheckOptions& o) {
  std::vector<SuiteResult> out;
  for (const std::int64_t clips : {1, 2})
  for (const bool pyramidal : {true, false}) {
    for (const bool multiply : {true, false}) {
      SmeConfig cfg;
      cfg.channels = 16;
      cfg.reduction = 4;
      cfg.motion = pyramidal ? MotionMode::kPyramidal : MotionMode::kSimple;
      cfg.alignment = multiply ? AlignmentOp::kMultiply : AlignmentOp::kAdd;
      cfg.validate();
      Rng rng(mix_seed(o.seed, 100 + 4 * clips + 2 * pyramidal + multiply));
      auto params = std::make_shared<SmeParams<double>>(SmeParams<double>::init(cfg, rng));
      auto input = std::make_shared<P>("input", normal_tensor<double>({2 * clips, 16, 4, 4}, 1.0, rng));
      // Nonzero recovery bias so the sigmoid is exercised off its symmetry point.
      randomize({&params->recover_bias}, rng, 0.5);
      auto list = params->parameters();
      list.push_back(input.get());
      auto f = [params, input, cfg](Tp& t) {
        return project(sme_forward(t.param(*input), 2, bind(t, *params), cfg), 21);
      };
      const std::string name = std::string("sme/") + (pyramidal ? "pyramidal" : "simple") + "_" +
                               (multiply ? "multiply" : "add") + (clips > 1 ? "_two_clips" : "");
      out.push_back({name, grad_check(f, list, o)});
    }
  }
  return out;
}

std::vector<SuiteResult> cti_suite(const GradCheckOptions& o) {
  std::vector<SuiteResult> out;
  for (const auto mode : {IntegrationMode::kCrossAttention, IntegrationMode::kIndependent, IntegrationMode::kAddition}) {
    CtiConfig cfg;
    cfg.channels = 8;
    cfg.groups = 4;
    cfg.integration = mode;
    cfg.validate();
    Rng rng(mix_seed(o.seed, 200 + static_cast<int>(mode)));
    auto params = std::make_shared<CtiParams<double>>(CtiParams<double>::init(cfg, rng));
    randomize(params->parameters(), rng, 0.7);
    auto input = std::make_shared<P>("input", normal_tensor<double>({4, 8, 3, 3}, 1.0, rng));
    auto list = params->parameters();
    list.push_back(input.get());
    auto f = [params, input, cfg](Tp& t) { return project(cti_forward(t.param(*input), 4, bind(t, *params), cfg), 22); };
    out.push_back({"cti/" + std::string(mode == IntegrationMode::kCrossAttention ? "cross_attention"
                                        : mode == IntegrationMode::kIndependent  ? "independent"
                                                                                  : "addition"),
                   grad_check(f, list, o)});
  }
  return out;
}

std::vector<SuiteResult> block_suite(const GradCheckOptions& o) {
  std::vector<SuiteResult> out;
  for (const auto fusion : {Fusion::kCascade, Fusion::kSummation, Fusion::kConcatenation}) {
    BlockConfig cfg;
    cfg.in_channels = 8;
    cfg.bottleneck_channels = 8;
    cfg.out_channels = 8;
    cfg.frames = 2;
    cfg.fusion = fusion;
    cfg.sme.reduction = 4;
    cfg.cti.groups = 4;
    cfg.validate();
    Rng rng(mix_seed(o.seed, 300 + static_cast<int>(fusion)));
    auto params = std::make_shared<BlockParams<double>>(BlockParams<double>::init(cfg, rng, "block"));
    randomize(params->cti->parameters(), rng, 0.7);
    auto input = std::make_shared<P>("input", normal_tensor<double>({2, 8, 6, 6}, 1.0, rng));
    auto list = params->parameters();
    list.push_back(input.get());
    auto f = [params, input, cfg](Tp& t) {
      return project(block_forward(t.param(*input), *params, cfg, ops::NormMode::kTrain), 23);
    };
    out.push_back({"block/" + fusion_name(fusion), grad_check(f, list, o)});
  }
  return out;
}

std::vector<SuiteResult> model_suite(const GradCheckOptions& o) {
  ModelSpec spec;
  spec.name = "gradcheck";
  spec.frames = 2;
  spec.num_classes = 3;
  spec.stem_channels = 16;
  spec.stem_kernel = 3;
  spec.stem_stride = 1;
  spec.stages = {{1, 16, 16, 1, {}}};
  spec.sme.reduction = 4;
  spec.cti.groups = 4;
  auto model = std::make_shared<Model<double>>(Model<double>::init(spec, o.seed));
  Rng rng(mix_seed(o.seed, 400));
  // Move the temporal modules off their near-identity initialization.
  for (auto& b : model->blocks) {
    randomize({&b.sme->recover_bias}, rng, 0.5);
    randomize(b.cti->parameters(), rng, 0.7);
  }
  auto clips = std::make_shared<Tensor<double>>(normal_tensor<double>({2, 2, 3, 8, 8}, 1.0, rng));
  auto f = [model, clips](Tp& t) {
    static const std::vector<int> labels{2, 0};
    return ops::cross_entropy(model_forward(t.constant(*clips), *model, ops::NormMode::kTrain), labels);
  };
  return {{"model/one_block", grad_check(f, model->parameters(), o)}};
}

}  // namespace

std::vector<std::string> gradcheck_suite_names() { return {"primitives", "sme", "cti", "block", "model"}; }

std::vector<SuiteResult> run_gradcheck_suite(const std::string& suite, const GradCheckOptions& options) {
  if (suite == "primitives") return primitives(options);
  if (suite == "sme") return sme_suite(options);
  if (suite == "cti") return cti_suite(options);
  if (suite == "block") return block_suite(options);
  if (suite == "model") return model_suite(options);
  if (suite == "all") {
    std::vector<SuiteResult> out;
    for (const auto& n : gradcheck_suite_names())
      for (auto& r : run_gradcheck_suite(n, options)) out.push_back(std::move(r));
    return out;
  }
  throw ConfigError("unknown gradcheck suite '" + suite + "' (primitives|sme|cti|block|model|all)");
}

}  // namespace tsi
