#include "tsi/sme.hpp"

#include <cmath>

#include "tsi/init.hpp"
#include "tsi/ops.hpp"

namespace tsi {

void SmeConfig::validate() const {
  if (channels < 1) throw ConfigError("sme: channels must be positive");
  if (reduction < 1 || channels % reduction != 0) {
    throw ConfigError("sme: channels " + std::to_string(channels) + " not divisible by reduction ratio " +
                      std::to_string(reduction));
  }
  if (pyramid_depth < 1) throw ConfigError("sme: pyramid depth must be >= 1");
  if (motion_kernel_size < 1 || motion_kernel_size % 2 == 0) throw ConfigError("sme: motion kernel size must be odd");
}

template <typename T>
SmeParams<T> SmeParams<T>::init(const SmeConfig& cfg, Rng& rng, const std::string& prefix) {
  cfg.validate();
  const std::int64_t c = cfg.channels, d = cfg.reduced_channels(), k = cfg.motion_kernel_size;
  SmeParams p;
  p.reduce_proj = {prefix + ".reduce_proj", fan_in_normal<T>({d, c, 1, 1}, rng, 1.0)};
  if (!cfg.share_reduction) p.motion_reduce_proj = {prefix + ".motion_reduce_proj", fan_in_normal<T>({d, c, 1, 1}, rng, 1.0)};
  for (std::int64_t j = 0; j < cfg.kernel_count(); ++j) {
    p.pyramid_kernels.push_back(
        {prefix + ".pyramid_kernels[" + std::to_string(j) + "]", fan_in_normal<T>({d, 1, k, k}, rng, 1.0)});
  }
  p.recover_proj = {prefix + ".recover_proj", fan_in_normal<T>({c, d, 1, 1}, rng, 1.0)};
  p.recover_bias = {prefix + ".recover_bias", Tensor<T>(Shape{c}), false};
  return p;
}

template <typename T>
std::vector<Parameter<T>*> SmeParams<T>::parameters() {
  std::vector<Parameter<T>*> out{&reduce_proj};
  if (!motion_reduce_proj.value.empty()) out.push_back(&motion_reduce_proj);
  for (auto& k : pyramid_kernels) out.push_back(&k);
  out.push_back(&recover_proj);
  out.push_back(&recover_bias);
  return out;
}

template <typename T>
void SmeParams<T>::validate(const SmeConfig& cfg) const {
  cfg.validate();
  const std::int64_t c = cfg.channels, d = cfg.reduced_channels(), k = cfg.motion_kernel_size;
  auto expect = [](const Parameter<T>& p, const Shape& s, const char* what) {
    if (p.value.shape() != s) {
      throw ConfigError(std::string("sme: ") + what + " has shape " + shape_str(p.value.shape()) + ", expected " +
                        shape_str(s));
    }
  };
  expect(reduce_proj, {d, c, 1, 1}, "reduce_proj");
  if (!cfg.share_reduction) expect(motion_reduce_proj, {d, c, 1, 1}, "motion_reduce_proj");
  if (static_cast<std::int64_t>(pyramid_kernels.size()) != cfg.kernel_count()) {
    throw ConfigError("sme: expected " + std::to_string(cfg.kernel_count()) + " motion kernels, found " +
                      std::to_string(pyramid_kernels.size()));
  }
  for (const auto& pk : pyramid_kernels) expect(pk, {d, 1, k, k}, "pyramid kernel");
  expect(recover_proj, {c, d, 1, 1}, "recover_proj");
  expect(recover_bias, {c}, "recover_bias");
}

template <typename T>
SmeVars<T> bind(Tape<T>& tape, SmeParams<T>& params) {
  SmeVars<T> v;
  v.reduce_proj = tape.param(params.reduce_proj);
  if (!params.motion_reduce_proj.value.empty()) v.motion_reduce_proj = tape.param(params.motion_reduce_proj);
  for (auto& k : params.pyramid_kernels) v.pyramid_kernels.push_back(tape.param(k));
  v.recover_proj = tape.param(params.recover_proj);
  v.recover_bias = tape.param(params.recover_bias);
  return v;
}

template <typename T>
Var<T> reduce_channels(const Var<T>& x, const Var<T>& reduce_proj) {
  if (x.shape().size() != 4) throw ShapeError("reduce_channels expects [B,C,H,W], got " + shape_str(x.shape()));
  if (reduce_proj.dim(1) != x.dim(1)) {
    throw ConfigError("reduce_channels: projection expects " + std::to_string(reduce_proj.dim(1)) +
                      " input channels, got " + std::to_string(x.dim(1)));
  }
  return ops::conv2d(x, reduce_proj);
}

template <typename T>
SaliencyAlignment<T> saliency_align(const Var<T>& x_t, const Var<T>& x_next, AlignmentOp op) {
  const Shape& s = x_t.shape();
  if (s.size() != 4 || s != x_next.shape()) {
    throw ShapeError("saliency_align: expected matching [P,d,H,W] inputs, got " + shape_str(s) + " and " +
                     shape_str(x_next.shape()));
  }
  const std::int64_t pairs = s[0], d = s[1], hw = s[2] * s[3];
  if (hw == 0) throw ShapeError("saliency_align: empty spatial extent");
  auto queries = ops::permute(ops::reshape(x_t, {pairs, d, hw}), {0, 2, 1});  // [P, HW, d]
  auto keys = ops::reshape(x_next, {pairs, d, hw});                          // [P, d, HW]
  auto scores = ops::scale(ops::matmul(queries, keys), T(1) / std::sqrt(static_cast<T>(d)));
  auto attention = ops::softmax(scores, -1);                                 // [P, HW, HW]
  auto values = ops::permute(keys, {0, 2, 1});                               // [P, HW, d]
  auto salient = ops::matmul(attention, values);                             // [P, HW, d]
  salient = ops::reshape(ops::permute(salient, {0, 2, 1}), s);
  auto aligned = op == AlignmentOp::kMultiply ? ops::mul(x_next, salient) : ops::add(x_next, salient);
  return {aligned, attention};
}

template <typename T>
Var<T> pyramidal_motion(const Var<T>& x_t, const Var<T>& aligned, const std::vector<Var<T>>& kernels) {
  if (kernels.empty()) throw ConfigError("pyramidal_motion: no kernels");
  if (x_t.shape() != aligned.shape()) throw ShapeError("pyramidal_motion: input shapes differ");
  const std::int64_t d = aligned.dim(1);
  const std::int64_t pad = kernels.front().dim(-1) / 2;
  Var<T> level = ops::conv2d(aligned, kernels[0], 1, pad, d);
  Var<T> total = level;
  for (std::size_t k = 1; k < kernels.size(); ++k) {
    level = ops::conv2d(ops::add(level, aligned), kernels[k], 1, pad, d);
    total = ops::add(total, level);
  }
  return ops::sub(total, ops::scale(x_t, static_cast<T>(kernels.size())));
}

template <typename T>
Var<T> simple_motion(const Var<T>& x_t, const Var<T>& aligned, const Var<T>& kernel) {
  if (x_t.shape() != aligned.shape()) throw ShapeError("simple_motion: input shapes differ");
  const std::int64_t d = aligned.dim(1);
  return ops::sub(ops::conv2d(aligned, kernel, 1, kernel.dim(-1) / 2, d), x_t);
}

namespace {

template <typename T>
Var<T> attention_from_pooled(const Var<T>& pooled, const Var<T>& recover_proj, const Var<T>& recover_bias) {
  const std::int64_t c = recover_proj.dim(0);
  auto logits = ops::add(ops::conv2d(pooled, recover_proj), ops::reshape(recover_bias, {1, c, 1, 1}));
  return ops::sigmoid(logits);
}

}  // namespace

template <typename T>
Var<T> motion_attention(const Var<T>& motion, const Var<T>& recover_proj, const Var<T>& recover_bias) {
  return attention_from_pooled(ops::global_avg_pool_spatial(motion), recover_proj, recover_bias);
}

template <typename T>
Var<T> sme_attention(const Var<T>& x, std::int64_t frames, const SmeVars<T>& w, const SmeConfig& cfg) {
  cfg.validate();
  const Shape& s = x.shape();
  if (s.size() != 4) throw ShapeError("sme expects [N*T,C,H,W], got " + shape_str(s));
  if (frames < 1 || s[0] % frames != 0) {
    throw ShapeError("sme: batch " + std::to_string(s[0]) + " is not a multiple of frames " + std::to_string(frames));
  }
  if (s[1] != cfg.channels) {
    throw ConfigError("sme: input has " + std::to_string(s[1]) + " channels, config expects " +
                      std::to_string(cfg.channels));
  }
  if (static_cast<std::int64_t>(w.pyramid_kernels.size()) != cfg.kernel_count()) {
    throw ConfigError("sme: parameter set does not match motion configuration");
  }
  const std::int64_t clips = s[0] / frames, d = cfg.reduced_channels(), h = s[2], wd = s[3];
  Tape<T>& tape = x.tape();

  Var<T> pooled;
  if (frames == 1) {
    pooled = tape.constant(Tensor<T>(Shape{s[0], d, 1, 1}));
  } else {
    const std::int64_t pairs = clips * (frames - 1);
    auto xr = ops::reshape(reduce_channels(x, w.reduce_proj), {clips, frames, d, h, wd});
    auto current = ops::reshape(ops::slice(xr, 1, 0, frames - 1), {pairs, d, h, wd});
    auto next = ops::reshape(ops::slice(xr, 1, 1, frames - 1), {pairs, d, h, wd});
    auto aligned = saliency_align(current, next, cfg.alignment).aligned;
    Var<T> base = current;
    if (!cfg.share_reduction) {
      if (!w.motion_reduce_proj.valid()) throw ConfigError("sme: missing motion_reduce_proj");
      auto xm = ops::reshape(reduce_channels(x, w.motion_reduce_proj), {clips, frames, d, h, wd});
      base = ops::reshape(ops::slice(xm, 1, 0, frames - 1), {pairs, d, h, wd});
    }
    auto motion = cfg.motion == MotionMode::kPyramidal ? pyramidal_motion(base, aligned, w.pyramid_kernels)
                                                       : simple_motion(base, aligned, w.pyramid_kernels.front());
    // GAP of the all-zero motion map of each clip's last frame is zero.
    auto pooled_pairs = ops::reshape(ops::global_avg_pool_spatial(motion), {clips, frames - 1, d});
    auto last = tape.constant(Tensor<T>(Shape{clips, 1, d}));
    pooled = ops::reshape(ops::concat<T>({pooled_pairs, last}, 1), {s[0], d, 1, 1});
  }
  return attention_from_pooled(pooled, w.recover_proj, w.recover_bias);
}

template <typename T>
Var<T> sme_forward(const Var<T>& x, std::int64_t frames, const SmeVars<T>& w, const SmeConfig& cfg) {
  auto att = sme_attention(x, frames, w, cfg);
  return ops::add(x, ops::mul(x, att));
}

#define TSI_INSTANTIATE_SME(T)                                                                                \
  template struct SmeParams<T>;                                                                               \
  template SmeVars<T> bind<T>(Tape<T>&, SmeParams<T>&);                                                       \
  template Var<T> reduce_channels<T>(const Var<T>&, const Var<T>&);                                           \
  template SaliencyAlignment<T> saliency_align<T>(const Var<T>&, const Var<T>&, AlignmentOp);                 \
  template Var<T> pyramidal_motion<T>(const Var<T>&, const Var<T>&, const std::vector<Var<T>>&);              \
  template Var<T> simple_motion<T>(const Var<T>&, const Var<T>&, const Var<T>&);                              \
  template Var<T> motion_attention<T>(const Var<T>&, const Var<T>&, const Var<T>&);                           \
  template Var<T> sme_attention<T>(const Var<T>&, std::int64_t, const SmeVars<T>&, const SmeConfig&);         \
  template Var<T> sme_forward<T>(const Var<T>&, std::int64_t, const SmeVars<T>&, const SmeConfig&);

TSI_INSTANTIATE_SME(float)
TSI_INSTANTIATE_SME(double)

}  // namespace tsi
