#include "tsi/profiler.hpp"

#include <fmt/format.h>

#include <set>

namespace tsi::profile {

using nlohmann::json;

namespace {

std::int64_t conv_out(std::int64_t in, std::int64_t k, std::int64_t s, std::int64_t p) { return (in + 2 * p - k) / s + 1; }

std::int64_t product(const std::vector<std::int64_t>& v) {
  std::int64_t n = 1;
  for (auto d : v) n *= d;
  return n;
}

/// Scalar operations per input element for the non-MAC kinds.
const std::vector<std::pair<std::string, std::int64_t>> kElementwise{
    {"relu", 1}, {"add", 1}, {"sub", 1}, {"mul", 1}, {"scale", 1},
    // exp, add, reciprocal
    {"sigmoid", 3},
    // max, subtract, exp, sum, divide
    {"softmax", 5},
    // eval-mode scale and shift
    {"batch_norm", 2},
    // one add per element
    {"gap", 1},
};

LayerRecord count_one(const LayerDesc& d) {
  LayerRecord r{d.name, d.kind, d.group, {}, 0, 0, 0};
  if (d.kind == "conv2d") {
    if (d.groups < 1 || d.in_channels % d.groups || d.out_channels % d.groups) {
      throw ConfigError("profile: layer " + d.name + " has channels not divisible by groups");
    }
    const std::int64_t ho = conv_out(d.height, d.kernel, d.stride, d.padding);
    const std::int64_t wo = conv_out(d.width, d.kernel, d.stride, d.padding);
    r.output_shape = {d.batch, d.out_channels, ho, wo};
    const std::int64_t per_out = (d.in_channels / d.groups) * d.kernel * d.kernel;
    r.macs = product(r.output_shape) * per_out;
    r.params = d.out_channels * per_out + (d.bias ? d.out_channels : 0);
    if (d.bias) r.other_ops = product(r.output_shape);
  } else if (d.kind == "conv1d") {
    r.output_shape = {d.batch, d.in_channels, d.length};
    r.macs = product(r.output_shape) * d.kernel;
    r.params = d.in_channels * d.kernel;
  } else if (d.kind == "fc") {
    r.output_shape = {d.batch, d.out_channels};
    r.macs = d.batch * d.in_channels * d.out_channels;
    r.params = d.in_channels * d.out_channels + (d.bias ? d.out_channels : 0);
    if (d.bias) r.other_ops = d.batch * d.out_channels;
  } else if (d.kind == "matmul") {
    r.output_shape = {d.batch, d.m, d.n};
    r.macs = d.batch * d.m * d.k * d.n;
  } else if (d.kind == "max_pool") {
    const std::int64_t ho = conv_out(d.height, d.kernel, d.stride, d.padding);
    const std::int64_t wo = conv_out(d.width, d.kernel, d.stride, d.padding);
    r.output_shape = {d.batch, d.in_channels, ho, wo};
    r.other_ops = product(r.output_shape) * (d.kernel * d.kernel - 1);
  } else {
    bool found = false;
    for (const auto& [kind, per] : kElementwise) {
      if (kind == d.kind) {
        found = true;
        r.other_ops = d.elements * per;
      }
    }
    if (!found) throw ConfigError("profile: unsupported layer kind '" + d.kind + "'");
    r.output_shape = {d.elements};
    if (d.kind == "batch_norm") r.params = 2 * d.channels;
  }
  return r;
}

/// Emits the layer sequence of the forward pass while tracking [B, C, H, W].
class Walker {
 public:
  Walker(std::int64_t b, std::int64_t c, std::int64_t h, std::int64_t w) : b_(b), c_(c), h_(h), w_(w) {}

  std::vector<LayerDesc> layers;

  std::int64_t numel() const { return b_ * c_ * h_ * w_; }

  LayerDesc& conv(const std::string& name, std::int64_t cout, std::int64_t k, std::int64_t stride, std::int64_t pad,
                  std::int64_t groups = 1, bool bias = false, const std::string& group = "backbone") {
    LayerDesc d;
    d.name = name;
    d.kind = "conv2d";
    d.batch = b_;
    d.in_channels = c_;
    d.out_channels = cout;
    d.height = h_;
    d.width = w_;
    d.kernel = k;
    d.stride = stride;
    d.padding = pad;
    d.groups = groups;
    d.bias = bias;
    d.group = group;
    layers.push_back(d);
    c_ = cout;
    h_ = conv_out(h_, k, stride, pad);
    w_ = conv_out(w_, k, stride, pad);
    return layers.back();
  }

  void elementwise(const std::string& name, const std::string& kind, std::int64_t elements,
                   const std::string& group = "backbone") {
    LayerDesc d;
    d.name = name;
    d.kind = kind;
    d.elements = elements;
    d.group = group;
    layers.push_back(d);
  }

  void norm(const std::string& name, bool enabled, const std::string& group = "backbone") {
    if (!enabled) return;
    LayerDesc d;
    d.name = name;
    d.kind = "batch_norm";
    d.elements = numel();
    d.channels = c_;
    d.group = group;
    layers.push_back(d);
  }

  void max_pool(const std::string& name, std::int64_t k, std::int64_t s, std::int64_t p) {
    LayerDesc d;
    d.name = name;
    d.kind = "max_pool";
    d.batch = b_;
    d.in_channels = c_;
    d.height = h_;
    d.width = w_;
    d.kernel = k;
    d.stride = s;
    d.padding = p;
    layers.push_back(d);
    h_ = conv_out(h_, k, s, p);
    w_ = conv_out(w_, k, s, p);
  }

  void add_layer(LayerDesc d) { layers.push_back(std::move(d)); }

  std::int64_t b_, c_, h_, w_;
};

void describe_sme(Walker& w, const std::string& p, const SmeConfig& cfg, std::int64_t clips, std::int64_t frames) {
  const std::string g = "sme";
  const std::int64_t c = w.c_, d = cfg.reduced_channels(), h = w.h_, wd = w.w_, hw = h * wd, nt = w.b_;
  const std::int64_t pairs = clips * (frames - 1);
  // A single frame skips the motion path; its weights still count as parameters.
  const std::int64_t reduce_batch = pairs > 0 ? nt : 0;
  {
    Walker r(reduce_batch, c, h, wd);
    r.conv(p + ".reduce_proj", d, 1, 1, 0, 1, false, g);
    if (!cfg.share_reduction) {
      Walker m(reduce_batch, c, h, wd);
      m.conv(p + ".motion_reduce_proj", d, 1, 1, 0, 1, false, g);
      for (auto& l : m.layers) w.add_layer(l);
    }
    for (auto& l : r.layers) w.add_layer(l);
    const std::string ga = "sme.alignment";
    LayerDesc scores;
    scores.name = p + ".align.scores";
    scores.kind = "matmul";
    scores.batch = pairs;
    scores.m = hw;
    scores.k = d;
    scores.n = hw;
    scores.group = ga;
    w.add_layer(scores);
    w.elementwise(p + ".align.scale", "scale", pairs * hw * hw, ga);
    w.elementwise(p + ".align.softmax", "softmax", pairs * hw * hw, ga);
    LayerDesc values = scores;
    values.name = p + ".align.values";
    values.k = hw;
    values.n = d;
    w.add_layer(values);
    w.elementwise(p + ".align.combine", cfg.alignment == AlignmentOp::kMultiply ? "mul" : "add", pairs * d * hw, ga);
    const std::int64_t k = cfg.motion_kernel_size;
    for (std::int64_t j = 0; j < cfg.kernel_count(); ++j) {
      if (j > 0) w.elementwise(p + ".motion.residual" + std::to_string(j), "add", pairs * d * hw, g);
      Walker m(pairs, d, h, wd);
      m.conv(p + ".motion.conv" + std::to_string(j), d, k, 1, k / 2, d, false, g);
      w.add_layer(m.layers.back());
      if (j > 0) w.elementwise(p + ".motion.sum" + std::to_string(j), "add", pairs * d * hw, g);
    }
    // Pyramidal mode subtracts K copies of x_t, folded as one scale and one subtraction.
    if (cfg.motion == MotionMode::kPyramidal) w.elementwise(p + ".motion.scale", "scale", pairs * d * hw, g);
    w.elementwise(p + ".motion.diff", "sub", pairs * d * hw, g);
    w.elementwise(p + ".gap", "gap", pairs * d * hw, g);
  }
  Walker rec(nt, d, 1, 1);
  rec.conv(p + ".recover_proj", c, 1, 1, 0, 1, true, g);
  w.add_layer(rec.layers.back());
  w.elementwise(p + ".sigmoid", "sigmoid", nt * c, g);
  w.elementwise(p + ".excite.mul", "mul", w.numel(), g);
  w.elementwise(p + ".excite.add", "add", w.numel(), g);
}

void describe_cti(Walker& w, const std::string& p, const CtiConfig& cfg, std::int64_t clips, std::int64_t frames) {
  const std::string g = "cti";
  const std::int64_t gc = cfg.group_channels(), hw = w.h_ * w.w_, nt = w.b_;
  const std::int64_t group_elems = nt * gc * hw;
  auto temporal = [&](std::int64_t idx) {
    LayerDesc d;
    d.name = p + ".temporal" + std::to_string(idx);
    d.kind = "conv1d";
    d.batch = clips * hw;
    d.in_channels = gc;
    d.length = frames;
    d.kernel = cfg.temporal_kernel_size;
    d.group = g;
    w.add_layer(d);
  };
  if (cfg.groups >= 2) temporal(1);
  for (std::int64_t i = 2; i < cfg.groups; ++i) {
    const std::string q = p + ".ci" + std::to_string(i);
    if (cfg.integration == IntegrationMode::kCrossAttention) {
      w.elementwise(q + ".sum", "add", group_elems, g);
      w.elementwise(q + ".gap", "gap", group_elems, g);
      LayerDesc fc;
      fc.name = q + ".fc";
      fc.kind = "fc";
      fc.batch = nt;
      fc.in_channels = gc;
      fc.out_channels = 2 * gc;
      fc.bias = true;
      fc.group = g;
      w.add_layer(fc);
      w.elementwise(q + ".softmax", "softmax", nt * 2 * gc, g);
      w.elementwise(q + ".weight_x", "mul", group_elems, g);
      w.elementwise(q + ".weight_t", "mul", group_elems, g);
      w.elementwise(q + ".combine", "add", group_elems, g);
    } else if (cfg.integration == IntegrationMode::kAddition) {
      w.elementwise(q + ".sum", "add", group_elems, g);
    }
    temporal(i);
  }
}

}  // namespace

std::int64_t FlopReport::macs_in(const std::string& prefix) const {
  std::int64_t n = 0;
  for (const auto& l : layers) {
    if (l.group == prefix || l.group.rfind(prefix + ".", 0) == 0) n += l.macs;
  }
  return n;
}

FlopReport count_layers(const std::vector<LayerDesc>& layers) {
  std::set<std::string> unknown;
  FlopReport r;
  for (const auto& d : layers) {
    try {
      r.layers.push_back(count_one(d));
    } catch (const ConfigError&) {
      if (d.kind == "conv2d") throw;
      unknown.insert(d.kind);
    }
  }
  if (!unknown.empty()) {
    std::string list;
    for (const auto& u : unknown) list += (list.empty() ? "" : ", ") + u;
    throw ConfigError("profile: unsupported layer kinds: " + list);
  }
  for (const auto& l : r.layers) {
    r.total_macs += l.macs;
    r.total_params += l.params;
    r.total_other_ops += l.other_ops;
  }
  return r;
}

std::vector<LayerDesc> describe_model(const ModelSpec& spec, std::int64_t frames, std::int64_t height,
                                      std::int64_t width) {
  spec.validate();
  if (frames < 1 || height < 1 || width < 1) throw ConfigError("profile: frames and size must be positive");
  ModelSpec s = spec;
  s.frames = frames;
  const auto configs = s.block_configs();
  Walker w(frames, spec.in_channels, height, width);
  w.conv("stem.conv", spec.stem_channels, spec.stem_kernel, spec.stem_stride, spec.stem_kernel / 2);
  w.norm("stem.bn", spec.batch_norm);
  w.elementwise("stem.relu", "relu", w.numel());
  if (spec.stem_pool) w.max_pool("stem.pool", spec.pool_kernel, spec.pool_stride, spec.pool_padding);
  for (std::size_t i = 0; i < configs.size(); ++i) {
    const BlockConfig& c = configs[i];
    const std::string p = "block" + std::to_string(i);
    const std::int64_t in_c = w.c_, in_h = w.h_, in_w = w.w_;
    w.conv(p + ".conv1", c.bottleneck_channels, 1, 1, 0);
    w.norm(p + ".bn1", c.batch_norm);
    w.elementwise(p + ".relu1", "relu", w.numel());
    w.conv(p + ".conv2", c.bottleneck_channels, 3, c.stride, 1);
    w.norm(p + ".bn2", c.batch_norm);
    w.elementwise(p + ".relu2", "relu", w.numel());
    const bool both = c.use_sme && c.use_cti;
    if (c.use_sme && (!both || c.fusion == Fusion::kCascade)) describe_sme(w, p + ".sme", c.sme, 1, frames);
    if (c.use_cti && (!both || c.fusion == Fusion::kCascade)) describe_cti(w, p + ".cti", c.cti, 1, frames);
    if (both && c.fusion != Fusion::kCascade) {
      describe_sme(w, p + ".sme", c.sme, 1, frames);
      describe_cti(w, p + ".cti", c.cti, 1, frames);
      if (c.fusion == Fusion::kSummation) {
        w.elementwise(p + ".fusion.add", "add", w.numel(), "fusion");
      } else {
        const std::int64_t b = c.bottleneck_channels;
        for (const char* branch : {"sme_merge", "cti_merge"}) {
          Walker m(w.b_, b, w.h_, w.w_);
          m.conv(p + "." + branch, b / 2, 1, 1, 0, 1, false, "fusion");
          w.add_layer(m.layers.back());
        }
      }
    }
    w.conv(p + ".conv3", c.out_channels, 1, 1, 0);
    w.norm(p + ".bn3", c.batch_norm);
    if (c.has_projection()) {
      Walker sc(w.b_, in_c, in_h, in_w);
      sc.conv(p + ".shortcut", c.out_channels, 1, c.stride, 0);
      sc.norm(p + ".bn_shortcut", c.batch_norm);
      for (auto& l : sc.layers) w.add_layer(l);
    }
    w.elementwise(p + ".residual", "add", w.numel());
    w.elementwise(p + ".relu3", "relu", w.numel());
  }
  w.elementwise("head.gap", "gap", w.numel(), "head");
  LayerDesc fc;
  fc.name = "head.fc";
  fc.kind = "fc";
  fc.batch = frames;
  fc.in_channels = w.c_;
  fc.out_channels = spec.num_classes;
  fc.bias = true;
  fc.group = "head";
  w.add_layer(fc);
  w.elementwise("head.consensus", "gap", frames * spec.num_classes, "head");
  return w.layers;
}

FlopReport count_model(const ModelSpec& spec, std::int64_t frames, std::int64_t height, std::int64_t width) {
  FlopReport r = count_layers(describe_model(spec, frames, height, width));
  r.model = spec.name;
  r.frames = frames;
  r.height = height;
  r.width = width;
  return r;
}

json FlopReport::to_json() const {
  json ls = json::array();
  for (const auto& l : layers) {
    ls.push_back({{"name", l.name},
                  {"kind", l.kind},
                  {"group", l.group},
                  {"output_shape", l.output_shape},
                  {"macs", l.macs},
                  {"params", l.params},
                  {"other_ops", l.other_ops}});
  }
  return {{"model", model},
          {"convention", kConventionNote},
          {"input", {{"frames", frames}, {"height", height}, {"width", width}}},
          {"layers", ls},
          {"totals",
           {{"macs", total_macs},
            {"params", total_params},
            {"other_ops", total_other_ops},
            {"sme_alignment_macs", macs_in("sme.alignment")},
            {"gflops", static_cast<double>(total_macs) / 1e9}}}};
}

FlopReport FlopReport::from_json(const json& j) {
  FlopReport r;
  r.model = j.at("model").get<std::string>();
  r.frames = j.at("input").at("frames").get<std::int64_t>();
  r.height = j.at("input").at("height").get<std::int64_t>();
  r.width = j.at("input").at("width").get<std::int64_t>();
  for (const auto& l : j.at("layers")) {
    r.layers.push_back({l.at("name").get<std::string>(), l.at("kind").get<std::string>(),
                        l.at("group").get<std::string>(), l.at("output_shape").get<std::vector<std::int64_t>>(),
                        l.at("macs").get<std::int64_t>(), l.at("params").get<std::int64_t>(),
                        l.at("other_ops").get<std::int64_t>()});
  }
  r.total_macs = j.at("totals").at("macs").get<std::int64_t>();
  r.total_params = j.at("totals").at("params").get<std::int64_t>();
  r.total_other_ops = j.at("totals").at("other_ops").get<std::int64_t>();
  return r;
}

std::string render_text(const FlopReport& r) {
  std::string out = fmt::format("# {}\n# input {} x 3 x {} x {}\n# {}\n", r.model, r.frames, r.height, r.width,
                                kConventionNote);
  out += fmt::format("{:<34} {:<11} {:<14} {:>22} {:>16} {:>12} {:>14}\n", "layer", "kind", "group", "output",
                     "MACs", "params", "non-MAC ops");
  for (const auto& l : r.layers) {
    std::string shape;
    for (std::size_t i = 0; i < l.output_shape.size(); ++i) shape += (i ? "x" : "") + std::to_string(l.output_shape[i]);
    out += fmt::format("{:<34} {:<11} {:<14} {:>22} {:>16} {:>12} {:>14}\n", l.name, l.kind, l.group, shape, l.macs,
                       l.params, l.other_ops);
  }
  out += fmt::format("{:<34} {:<11} {:<14} {:>22} {:>16} {:>12} {:>14}\n", "total", "", "", "", r.total_macs,
                     r.total_params, r.total_other_ops);
  out += fmt::format("GFLOPs (MAC) {:.3f}   of which saliency alignment {:.3f}   params {:.3f} M\n",
                     r.total_macs / 1e9, r.macs_in("sme.alignment") / 1e9, r.total_params / 1e6);
  return out;
}

std::string render_json(const FlopReport& r) { return r.to_json().dump(1); }

}  // namespace tsi::profile
