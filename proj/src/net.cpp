#include "tsi/net.hpp"

#include <fstream>
#include <set>

#include "tsi/init.hpp"

namespace tsi {

using nlohmann::json;

void BlockConfig::validate() {
  if (in_channels < 1 || bottleneck_channels < 1 || out_channels < 1) {
    throw ConfigError("block: channel counts must be positive");
  }
  if (stride < 1) throw ConfigError("block: stride must be >= 1");
  if (frames < 1) throw ConfigError("block: frames must be >= 1");
  sme.channels = bottleneck_channels;
  cti.channels = bottleneck_channels;
  if (use_sme) sme.validate();
  if (use_cti) cti.validate();
  if (use_sme && use_cti && fusion == Fusion::kConcatenation && bottleneck_channels % 2 != 0) {
    throw ConfigError("block: concatenation fusion needs an even bottleneck width, got " +
                      std::to_string(bottleneck_channels));
  }
}

template <typename T>
NormParams<T> NormParams<T>::init(std::int64_t channels, const std::string& prefix) {
  NormParams n;
  n.gamma = {prefix + ".gamma", Tensor<T>(Shape{channels}, T(1)), false};
  n.beta = {prefix + ".beta", Tensor<T>(Shape{channels}), false};
  n.stats = ops::BatchNormStats<T>(channels);
  return n;
}

namespace {

bool concat_merge(const BlockConfig& cfg) {
  return cfg.use_sme && cfg.use_cti && cfg.fusion == Fusion::kConcatenation;
}

template <typename T>
void add_norm_state(std::vector<std::pair<std::string, Tensor<T>*>>& out, NormParams<T>& n) {
  if (n.gamma.value.empty()) return;
  out.emplace_back(n.gamma.name, &n.gamma.value);
  out.emplace_back(n.beta.name, &n.beta.value);
  const std::string base = n.gamma.name.substr(0, n.gamma.name.rfind('.'));
  out.emplace_back(base + ".running_mean", &n.stats.running_mean);
  out.emplace_back(base + ".running_var", &n.stats.running_var);
}

template <typename T>
Var<T> maybe_norm(const Var<T>& x, NormParams<T>& n, bool enabled, ops::NormMode mode) {
  if (!enabled) return x;
  Tape<T>& tape = x.tape();
  return ops::batch_norm(x, tape.param(n.gamma), tape.param(n.beta), n.stats, mode);
}

}  // namespace

template <typename T>
BlockParams<T> BlockParams<T>::init(const BlockConfig& cfg_in, Rng& rng, const std::string& prefix) {
  BlockConfig cfg = cfg_in;
  cfg.validate();
  const std::int64_t cin = cfg.in_channels, b = cfg.bottleneck_channels, cout = cfg.out_channels;
  BlockParams p;
  p.conv1 = {prefix + ".conv1", fan_in_normal<T>({b, cin, 1, 1}, rng)};
  p.conv2 = {prefix + ".conv2", fan_in_normal<T>({b, b, 3, 3}, rng)};
  p.conv3 = {prefix + ".conv3", fan_in_normal<T>({cout, b, 1, 1}, rng)};
  if (cfg.has_projection()) p.shortcut = {prefix + ".shortcut", fan_in_normal<T>({cout, cin, 1, 1}, rng, 1.0)};
  if (cfg.batch_norm) {
    p.bn1 = NormParams<T>::init(b, prefix + ".bn1");
    p.bn2 = NormParams<T>::init(b, prefix + ".bn2");
    p.bn3 = NormParams<T>::init(cout, prefix + ".bn3");
    if (cfg.has_projection()) p.bn_shortcut = NormParams<T>::init(cout, prefix + ".bn_shortcut");
  }
  // Module weights come from their own streams so toggling one module leaves the rest unchanged.
  const std::uint64_t base = rng.next();
  if (cfg.use_sme) {
    Rng r(mix_seed(base, 1));
    p.sme = SmeParams<T>::init(cfg.sme, r, prefix + ".sme");
  }
  if (cfg.use_cti) {
    Rng r(mix_seed(base, 2));
    p.cti = CtiParams<T>::init(cfg.cti, r, prefix + ".cti");
  }
  if (concat_merge(cfg)) {
    Rng r(mix_seed(base, 3));
    p.sme_merge = {prefix + ".sme_merge", fan_in_normal<T>({b / 2, b, 1, 1}, r, 1.0)};
    p.cti_merge = {prefix + ".cti_merge", fan_in_normal<T>({b / 2, b, 1, 1}, r, 1.0)};
  }
  return p;
}

template <typename T>
std::vector<Parameter<T>*> BlockParams<T>::parameters() {
  std::vector<Parameter<T>*> out{&conv1};
  auto norm = [&](NormParams<T>& n) {
    if (!n.gamma.value.empty()) {
      out.push_back(&n.gamma);
      out.push_back(&n.beta);
    }
  };
  norm(bn1);
  out.push_back(&conv2);
  norm(bn2);
  if (sme) for (auto* q : sme->parameters()) out.push_back(q);
  if (cti) for (auto* q : cti->parameters()) out.push_back(q);
  if (!sme_merge.value.empty()) {
    out.push_back(&sme_merge);
    out.push_back(&cti_merge);
  }
  out.push_back(&conv3);
  norm(bn3);
  if (!shortcut.value.empty()) {
    out.push_back(&shortcut);
    norm(bn_shortcut);
  }
  return out;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> BlockParams<T>::state() {
  std::vector<std::pair<std::string, Tensor<T>*>> out;
  std::set<const Parameter<T>*> norm_params{&bn1.gamma, &bn1.beta, &bn2.gamma, &bn2.beta, &bn3.gamma,
                                            &bn3.beta, &bn_shortcut.gamma, &bn_shortcut.beta};
  for (auto* p : parameters()) {
    if (!norm_params.count(p)) out.emplace_back(p->name, &p->value);
  }
  add_norm_state(out, bn1);
  add_norm_state(out, bn2);
  add_norm_state(out, bn3);
  add_norm_state(out, bn_shortcut);
  return out;
}

template <typename T>
Var<T> temporal_section(const Var<T>& h, BlockParams<T>& p, const BlockConfig& cfg) {
  if (cfg.use_sme != p.sme.has_value() || cfg.use_cti != p.cti.has_value()) {
    throw ConfigError("block: parameters do not match the temporal module switches");
  }
  Tape<T>& tape = h.tape();
  auto run_sme = [&](const Var<T>& in) { return sme_forward(in, cfg.frames, bind(tape, *p.sme), cfg.sme); };
  auto run_cti = [&](const Var<T>& in) { return cti_forward(in, cfg.frames, bind(tape, *p.cti), cfg.cti); };
  if (!cfg.use_sme && !cfg.use_cti) return h;
  if (!cfg.use_cti) return run_sme(h);
  if (!cfg.use_sme) return run_cti(h);
  switch (cfg.fusion) {
    case Fusion::kCascade:
      return run_cti(run_sme(h));
    case Fusion::kSummation:
      return ops::add(run_sme(h), run_cti(h));
    case Fusion::kConcatenation: {
      if (p.sme_merge.value.empty()) throw ConfigError("block: concatenation fusion without merge projections");
      auto a = ops::conv2d(run_sme(h), tape.param(p.sme_merge));
      auto b = ops::conv2d(run_cti(h), tape.param(p.cti_merge));
      return ops::concat<T>({a, b}, 1);
    }
  }
  throw ConfigError("block: unknown fusion");
}

template <typename T>
Var<T> block_forward(const Var<T>& x, BlockParams<T>& p, const BlockConfig& cfg, ops::NormMode mode) {
  if (x.shape().size() != 4 || x.dim(1) != cfg.in_channels) {
    throw ShapeError("block expects [N*T," + std::to_string(cfg.in_channels) + ",H,W], got " + shape_str(x.shape()));
  }
  if (x.dim(0) % cfg.frames != 0) {
    throw ShapeError("block: batch " + std::to_string(x.dim(0)) + " is not a multiple of frames " +
                     std::to_string(cfg.frames));
  }
  Tape<T>& tape = x.tape();
  auto h = ops::relu(maybe_norm(ops::conv2d(x, tape.param(p.conv1)), p.bn1, cfg.batch_norm, mode));
  h = ops::relu(maybe_norm(ops::conv2d(h, tape.param(p.conv2), cfg.stride, 1), p.bn2, cfg.batch_norm, mode));
  h = temporal_section(h, p, cfg);
  h = maybe_norm(ops::conv2d(h, tape.param(p.conv3)), p.bn3, cfg.batch_norm, mode);
  Var<T> shortcut = x;
  if (cfg.has_projection()) {
    if (p.shortcut.value.empty()) throw ConfigError("block: projection shortcut weights missing");
    shortcut = maybe_norm(ops::conv2d(x, tape.param(p.shortcut), cfg.stride), p.bn_shortcut, cfg.batch_norm, mode);
  }
  return ops::relu(ops::add(h, shortcut));
}

// ---------------------------------------------------------------------------
// ModelSpec

std::vector<BlockConfig> ModelSpec::block_configs() const {
  std::vector<BlockConfig> out;
  std::int64_t in = stem_channels;
  for (std::size_t s = 0; s < stages.size(); ++s) {
    const StageSpec& st = stages[s];
    if (!st.tsi.empty() && static_cast<std::int64_t>(st.tsi.size()) != st.blocks) {
      throw ConfigError("stage " + std::to_string(s) + ": tsi list has " + std::to_string(st.tsi.size()) +
                        " entries for " + std::to_string(st.blocks) + " blocks");
    }
    for (std::int64_t b = 0; b < st.blocks; ++b) {
      const bool temporal = st.tsi.empty() || st.tsi[static_cast<std::size_t>(b)];
      BlockConfig c;
      c.in_channels = in;
      c.bottleneck_channels = st.bottleneck_channels;
      c.out_channels = st.out_channels;
      c.stride = b == 0 ? st.stride : 1;
      c.frames = frames;
      c.use_sme = use_sme && temporal;
      c.use_cti = use_cti && temporal;
      c.fusion = fusion;
      c.sme = sme;
      c.cti = cti;
      c.batch_norm = batch_norm;
      c.validate();
      out.push_back(c);
      in = st.out_channels;
    }
  }
  return out;
}

std::int64_t ModelSpec::feature_channels() const { return stages.empty() ? stem_channels : stages.back().out_channels; }

void ModelSpec::validate() const {
  if (frames < 1) throw ConfigError("model: frames must be >= 1");
  if (in_channels < 1) throw ConfigError("model: in_channels must be >= 1");
  if (num_classes < 1) throw ConfigError("model: num_classes must be >= 1");
  if (stem_channels < 1 || stem_kernel < 1 || stem_stride < 1) throw ConfigError("model: invalid stem");
  if (stem_pool && (pool_kernel < 1 || pool_stride < 1 || pool_padding < 0)) throw ConfigError("model: invalid pool");
  if (stages.empty()) throw ConfigError("model: at least one stage is required");
  for (const auto& st : stages) {
    if (st.blocks < 1) throw ConfigError("model: every stage needs at least one block");
  }
  (void)block_configs();
}

namespace {

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
  for (const auto& [k, v] : j.items()) {
    if (!allowed.count(k)) throw ConfigError(where + ": unknown key '" + k + "'");
  }
}

template <typename V>
void read_opt(const json& j, const char* key, V& out) {
  if (j.contains(key)) out = j.at(key).get<V>();
}

}  // namespace

std::string fusion_name(Fusion f) {
  switch (f) {
    case Fusion::kCascade: return "cascade";
    case Fusion::kSummation: return "summation";
    case Fusion::kConcatenation: return "concatenation";
  }
  return "?";
}

Fusion parse_fusion(const std::string& s) {
  if (s == "cascade") return Fusion::kCascade;
  if (s == "summation") return Fusion::kSummation;
  if (s == "concatenation") return Fusion::kConcatenation;
  throw ConfigError("unknown fusion '" + s + "' (cascade|summation|concatenation)");
}

std::string alignment_name(AlignmentOp op) { return op == AlignmentOp::kMultiply ? "multiply" : "add"; }

AlignmentOp parse_alignment(const std::string& s) {
  if (s == "multiply") return AlignmentOp::kMultiply;
  if (s == "add") return AlignmentOp::kAdd;
  throw ConfigError("unknown alignment '" + s + "' (multiply|add)");
}

std::string motion_name(MotionMode m) { return m == MotionMode::kPyramidal ? "pyramidal" : "simple"; }

MotionMode parse_motion(const std::string& s) {
  if (s == "pyramidal") return MotionMode::kPyramidal;
  if (s == "simple") return MotionMode::kSimple;
  throw ConfigError("unknown motion mode '" + s + "' (pyramidal|simple)");
}

std::string integration_name(IntegrationMode m) {
  switch (m) {
    case IntegrationMode::kCrossAttention: return "cross_attention";
    case IntegrationMode::kIndependent: return "independent";
    case IntegrationMode::kAddition: return "addition";
  }
  return "?";
}

IntegrationMode parse_integration(const std::string& s) {
  if (s == "cross_attention") return IntegrationMode::kCrossAttention;
  if (s == "independent") return IntegrationMode::kIndependent;
  if (s == "addition") return IntegrationMode::kAddition;
  throw ConfigError("unknown integration mode '" + s + "' (cross_attention|independent|addition)");
}

json to_json(const ModelSpec& m) {
  json stages = json::array();
  for (const auto& st : m.stages) {
    json s{{"blocks", st.blocks},
           {"out_channels", st.out_channels},
           {"bottleneck_channels", st.bottleneck_channels},
           {"stride", st.stride}};
    if (!st.tsi.empty()) s["tsi"] = st.tsi;
    stages.push_back(s);
  }
  json stem{{"channels", m.stem_channels}, {"kernel", m.stem_kernel}, {"stride", m.stem_stride}};
  if (m.stem_pool) stem["pool"] = {{"kernel", m.pool_kernel}, {"stride", m.pool_stride}, {"padding", m.pool_padding}};
  return {
      {"name", m.name},
      {"frames", m.frames},
      {"in_channels", m.in_channels},
      {"num_classes", m.num_classes},
      {"batch_norm", m.batch_norm},
      {"stem", stem},
      {"stages", stages},
      {"temporal", {{"use_sme", m.use_sme}, {"use_cti", m.use_cti}, {"fusion", fusion_name(m.fusion)}}},
      {"sme",
       {{"reduction", m.sme.reduction},
        {"pyramid_depth", m.sme.pyramid_depth},
        {"motion_kernel_size", m.sme.motion_kernel_size},
        {"alignment", alignment_name(m.sme.alignment)},
        {"motion", motion_name(m.sme.motion)},
        {"share_reduction", m.sme.share_reduction}}},
      {"cti",
       {{"groups", m.cti.groups},
        {"temporal_kernel_size", m.cti.temporal_kernel_size},
        {"integration", integration_name(m.cti.integration)}}},
  };
}

ModelSpec model_spec_from_json(const json& j) {
  try {
    check_keys(j,
               {"name", "frames", "in_channels", "num_classes", "batch_norm", "stem", "stages", "temporal", "sme",
                "cti"},
               "model spec");
    ModelSpec m;
    read_opt(j, "name", m.name);
    read_opt(j, "frames", m.frames);
    read_opt(j, "in_channels", m.in_channels);
    read_opt(j, "num_classes", m.num_classes);
    read_opt(j, "batch_norm", m.batch_norm);
    if (j.contains("stem")) {
      const json& s = j.at("stem");
      check_keys(s, {"channels", "kernel", "stride", "pool"}, "stem");
      read_opt(s, "channels", m.stem_channels);
      read_opt(s, "kernel", m.stem_kernel);
      read_opt(s, "stride", m.stem_stride);
      m.stem_pool = s.contains("pool") && !s.at("pool").is_null();
      if (m.stem_pool) {
        const json& p = s.at("pool");
        check_keys(p, {"kernel", "stride", "padding"}, "stem.pool");
        read_opt(p, "kernel", m.pool_kernel);
        read_opt(p, "stride", m.pool_stride);
        read_opt(p, "padding", m.pool_padding);
      }
    }
    for (const auto& s : j.at("stages")) {
      check_keys(s, {"blocks", "out_channels", "bottleneck_channels", "stride", "tsi"}, "stage");
      StageSpec st;
      read_opt(s, "blocks", st.blocks);
      st.out_channels = s.at("out_channels").get<std::int64_t>();
      st.bottleneck_channels = s.contains("bottleneck_channels") ? s.at("bottleneck_channels").get<std::int64_t>()
                                                                 : st.out_channels / 4;
      read_opt(s, "stride", st.stride);
      if (s.contains("tsi")) st.tsi = s.at("tsi").get<std::vector<bool>>();
      m.stages.push_back(st);
    }
    if (j.contains("temporal")) {
      const json& t = j.at("temporal");
      check_keys(t, {"use_sme", "use_cti", "fusion"}, "temporal");
      read_opt(t, "use_sme", m.use_sme);
      read_opt(t, "use_cti", m.use_cti);
      if (t.contains("fusion")) m.fusion = parse_fusion(t.at("fusion").get<std::string>());
    }
    if (j.contains("sme")) {
      const json& s = j.at("sme");
      check_keys(s, {"reduction", "pyramid_depth", "motion_kernel_size", "alignment", "motion", "share_reduction"},
                 "sme");
      read_opt(s, "reduction", m.sme.reduction);
      read_opt(s, "pyramid_depth", m.sme.pyramid_depth);
      read_opt(s, "motion_kernel_size", m.sme.motion_kernel_size);
      if (s.contains("alignment")) m.sme.alignment = parse_alignment(s.at("alignment").get<std::string>());
      if (s.contains("motion")) m.sme.motion = parse_motion(s.at("motion").get<std::string>());
      read_opt(s, "share_reduction", m.sme.share_reduction);
    }
    if (j.contains("cti")) {
      const json& c = j.at("cti");
      check_keys(c, {"groups", "temporal_kernel_size", "integration"}, "cti");
      read_opt(c, "groups", m.cti.groups);
      read_opt(c, "temporal_kernel_size", m.cti.temporal_kernel_size);
      if (c.contains("integration")) m.cti.integration = parse_integration(c.at("integration").get<std::string>());
    }
    m.validate();
    return m;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model spec: ") + e.what());
  }
}

ModelSpec load_model_spec(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open model spec " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("model spec " + path + ": " + e.what());
  }
  return model_spec_from_json(j);
}

// ---------------------------------------------------------------------------
// Model

template <typename T>
Model<T> Model<T>::init(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  Model m;
  m.spec = spec;
  m.configs = spec.block_configs();
  Rng rng(mix_seed(seed, 0));
  m.stem = {"stem.conv", fan_in_normal<T>({spec.stem_channels, spec.in_channels, spec.stem_kernel, spec.stem_kernel}, rng)};
  if (spec.batch_norm) m.stem_bn = NormParams<T>::init(spec.stem_channels, "stem.bn");
  for (std::size_t i = 0; i < m.configs.size(); ++i) {
    Rng brng(mix_seed(seed, i + 1));
    m.blocks.push_back(BlockParams<T>::init(m.configs[i], brng, "block" + std::to_string(i)));
  }
  Rng hrng(mix_seed(seed, m.configs.size() + 1));
  m.fc_weight = {"fc.weight", fan_in_normal<T>({spec.num_classes, spec.feature_channels()}, hrng, 1.0)};
  m.fc_bias = {"fc.bias", Tensor<T>(Shape{spec.num_classes}), false};
  return m;
}

template <typename T>
std::vector<Parameter<T>*> Model<T>::parameters() {
  std::vector<Parameter<T>*> out{&stem};
  if (!stem_bn.gamma.value.empty()) {
    out.push_back(&stem_bn.gamma);
    out.push_back(&stem_bn.beta);
  }
  for (auto& b : blocks)
    for (auto* p : b.parameters()) out.push_back(p);
  out.push_back(&fc_weight);
  out.push_back(&fc_bias);
  return out;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> Model<T>::state() {
  std::vector<std::pair<std::string, Tensor<T>*>> out{{stem.name, &stem.value}};
  add_norm_state(out, stem_bn);
  for (auto& b : blocks)
    for (auto& e : b.state()) out.push_back(e);
  out.emplace_back(fc_weight.name, &fc_weight.value);
  out.emplace_back(fc_bias.name, &fc_bias.value);
  return out;
}

template <typename T>
std::size_t Model<T>::parameter_count() {
  std::size_t n = 0;
  for (auto* p : parameters()) n += p->value.numel();
  return n;
}

template <typename T>
Var<T> model_forward(const Var<T>& clips, Model<T>& model, ops::NormMode mode) {
  const ModelSpec& spec = model.spec;
  const Shape& s = clips.shape();
  if (s.size() != 5 || s[1] != spec.frames || s[2] != spec.in_channels) {
    throw ShapeError("model expects clips [N," + std::to_string(spec.frames) + "," + std::to_string(spec.in_channels) +
                     ",H,W], got " + shape_str(s));
  }
  const std::int64_t n = s[0], t = s[1];
  Tape<T>& tape = clips.tape();
  auto x = ops::reshape(clips, {n * t, s[2], s[3], s[4]});
  x = ops::conv2d(x, tape.param(model.stem), spec.stem_stride, spec.stem_kernel / 2);
  x = ops::relu(maybe_norm(x, model.stem_bn, spec.batch_norm, mode));
  if (spec.stem_pool) x = ops::max_pool2d(x, spec.pool_kernel, spec.pool_stride, spec.pool_padding);
  for (std::size_t i = 0; i < model.blocks.size(); ++i) x = block_forward(x, model.blocks[i], model.configs[i], mode);
  const std::int64_t f = x.dim(1);
  auto pooled = ops::reshape(ops::global_avg_pool_spatial(x), {n * t, f});
  auto logits = ops::fully_connected(pooled, tape.param(model.fc_weight), tape.param(model.fc_bias));
  return ops::mean_axis(ops::reshape(logits, {n, t, spec.num_classes}), 1);
}

#define TSI_INSTANTIATE_NET(T)                                                                            \
  template struct NormParams<T>;                                                                          \
  template struct BlockParams<T>;                                                                         \
  template struct Model<T>;                                                                               \
  template Var<T> temporal_section<T>(const Var<T>&, BlockParams<T>&, const BlockConfig&);                \
  template Var<T> block_forward<T>(const Var<T>&, BlockParams<T>&, const BlockConfig&, ops::NormMode);    \
  template Var<T> model_forward<T>(const Var<T>&, Model<T>&, ops::NormMode);

TSI_INSTANTIATE_NET(float)
TSI_INSTANTIATE_NET(double)

}  // namespace tsi
