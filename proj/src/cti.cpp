#include "tsi/cti.hpp"

#include "tsi/init.hpp"
#include "tsi/ops.hpp"

namespace tsi {

void CtiConfig::validate() const {
  if (channels < 1) throw ConfigError("cti: channels must be positive");
  if (groups < 1 || channels % groups != 0) {
    throw ConfigError("cti: channels " + std::to_string(channels) + " not divisible by groups " +
                      std::to_string(groups));
  }
  if (temporal_kernel_size < 1 || temporal_kernel_size % 2 == 0) {
    throw ConfigError("cti: temporal kernel size must be odd");
  }
}

template <typename T>
CtiParams<T> CtiParams<T>::init(const CtiConfig& cfg, Rng& rng, const std::string& prefix) {
  cfg.validate();
  const std::int64_t c = cfg.group_channels(), k = cfg.temporal_kernel_size;
  CtiParams p;
  for (std::int64_t g = 1; g < cfg.groups; ++g) {
    Tensor<T> w(Shape{c, k});
    for (std::int64_t ch = 0; ch < c; ++ch) w[ch * k + k / 2] = T(1);
    p.temporal_kernels.push_back({prefix + ".temporal_kernels[" + std::to_string(g) + "]", std::move(w)});
  }
  for (std::int64_t g = 2; g < cfg.groups; ++g) {
    const std::string tag = "[" + std::to_string(g) + "]";
    p.integration_fc.push_back({prefix + ".integration_fc" + tag, normal_tensor<T>({2 * c, c}, 0.01, rng)});
    p.integration_bias.push_back({prefix + ".integration_bias" + tag, Tensor<T>(Shape{2 * c}), false});
  }
  return p;
}

template <typename T>
std::vector<Parameter<T>*> CtiParams<T>::parameters() {
  std::vector<Parameter<T>*> out;
  for (auto& k : temporal_kernels) out.push_back(&k);
  for (std::size_t i = 0; i < integration_fc.size(); ++i) {
    out.push_back(&integration_fc[i]);
    out.push_back(&integration_bias[i]);
  }
  return out;
}

template <typename T>
void CtiParams<T>::validate(const CtiConfig& cfg) const {
  cfg.validate();
  const std::int64_t c = cfg.group_channels(), k = cfg.temporal_kernel_size;
  const auto g = static_cast<std::size_t>(cfg.groups);
  if (temporal_kernels.size() != g - 1) {
    throw ConfigError("cti: expected " + std::to_string(g - 1) + " temporal kernels, found " +
                      std::to_string(temporal_kernels.size()));
  }
  const std::size_t junctions = g >= 2 ? g - 2 : 0;
  if (integration_fc.size() != junctions || integration_bias.size() != junctions) {
    throw ConfigError("cti: expected " + std::to_string(junctions) + " integration maps, found " +
                      std::to_string(integration_fc.size()));
  }
  for (const auto& w : temporal_kernels) {
    if (w.value.shape() != Shape{c, k}) throw ConfigError("cti: temporal kernel has shape " + shape_str(w.value.shape()));
  }
  for (std::size_t i = 0; i < junctions; ++i) {
    if (integration_fc[i].value.shape() != Shape{2 * c, c} || integration_bias[i].value.shape() != Shape{2 * c}) {
      throw ConfigError("cti: integration map " + std::to_string(i) + " has inconsistent shape");
    }
  }
}

template <typename T>
CtiVars<T> bind(Tape<T>& tape, CtiParams<T>& params) {
  CtiVars<T> v;
  for (auto& k : params.temporal_kernels) v.temporal_kernels.push_back(tape.param(k));
  for (auto& w : params.integration_fc) v.integration_fc.push_back(tape.param(w));
  for (auto& b : params.integration_bias) v.integration_bias.push_back(tape.param(b));
  return v;
}

template <typename T>
std::vector<Var<T>> split_groups(const Var<T>& x, std::int64_t groups) {
  if (x.shape().size() != 4) throw ShapeError("split_groups expects [B,C,H,W], got " + shape_str(x.shape()));
  const std::int64_t c = x.dim(1);
  if (groups < 1 || c % groups != 0) {
    throw ConfigError("split_groups: " + std::to_string(c) + " channels not divisible by " + std::to_string(groups));
  }
  if (groups == 1) return {x};
  std::vector<Var<T>> out;
  const std::int64_t width = c / groups;
  for (std::int64_t g = 0; g < groups; ++g) out.push_back(ops::slice(x, 1, g * width, width));
  return out;
}

template <typename T>
Integration<T> cross_perception_integrate(const Var<T>& t_prev, const Var<T>& x_g, const Var<T>& fc_weight,
                                          const Var<T>& fc_bias) {
  if (t_prev.shape() != x_g.shape() || x_g.shape().size() != 4) {
    throw ShapeError("cross_perception_integrate: inputs " + shape_str(t_prev.shape()) + " and " +
                     shape_str(x_g.shape()) + " must be equal [B,c,H,W]");
  }
  const std::int64_t b = x_g.dim(0), c = x_g.dim(1);
  auto pooled = ops::reshape(ops::global_avg_pool_spatial(ops::add(t_prev, x_g)), {b, c});
  auto logits = ops::reshape(ops::fully_connected(pooled, fc_weight, fc_bias), {b, 2, c});
  auto weights = ops::softmax(logits, 1);
  auto alpha = ops::reshape(ops::slice(weights, 1, 0, 1), {b, c, 1, 1});
  auto beta = ops::reshape(ops::slice(weights, 1, 1, 1), {b, c, 1, 1});
  auto out = ops::add(ops::mul(alpha, x_g), ops::mul(beta, t_prev));
  return {out, alpha, beta};
}

template <typename T>
Var<T> temporal_conv(const Var<T>& x, std::int64_t frames, const Var<T>& w) {
  const Shape& s = x.shape();
  if (s.size() != 4 || frames < 1 || s[0] % frames != 0) {
    throw ShapeError("temporal_conv: input " + shape_str(s) + " does not fold into " + std::to_string(frames) +
                     " frames");
  }
  const std::int64_t n = s[0] / frames, c = s[1], hw = s[2] * s[3];
  auto seq = ops::permute(ops::reshape(x, {n, frames, c, hw}), {0, 3, 2, 1});  // [N, HW, c, T]
  auto y = ops::conv1d_temporal(ops::reshape(seq, {n * hw, c, frames}), w);
  return ops::reshape(ops::permute(ops::reshape(y, {n, hw, c, frames}), {0, 3, 2, 1}), s);
}

template <typename T>
Var<T> cti_forward(const Var<T>& x, std::int64_t frames, const CtiVars<T>& w, const CtiConfig& cfg) {
  cfg.validate();
  if (x.shape().size() != 4) throw ShapeError("cti expects [N*T,C,H,W], got " + shape_str(x.shape()));
  if (x.dim(1) != cfg.channels) {
    throw ConfigError("cti: input has " + std::to_string(x.dim(1)) + " channels, config expects " +
                      std::to_string(cfg.channels));
  }
  const auto g = static_cast<std::size_t>(cfg.groups);
  if (w.temporal_kernels.size() != g - 1 || w.integration_fc.size() != (g >= 2 ? g - 2 : 0)) {
    throw ConfigError("cti: parameter set does not match group count " + std::to_string(g));
  }
  auto parts = split_groups(x, cfg.groups);
  if (g == 1) return x;
  std::vector<Var<T>> outs{parts[0]};
  outs.push_back(temporal_conv(parts[1], frames, w.temporal_kernels[0]));
  for (std::size_t i = 2; i < g; ++i) {
    Var<T> fused;
    switch (cfg.integration) {
      case IntegrationMode::kCrossAttention:
        fused = cross_perception_integrate(outs.back(), parts[i], w.integration_fc[i - 2], w.integration_bias[i - 2]).out;
        break;
      case IntegrationMode::kIndependent:
        fused = parts[i];
        break;
      case IntegrationMode::kAddition:
        fused = ops::add(outs.back(), parts[i]);
        break;
    }
    outs.push_back(temporal_conv(fused, frames, w.temporal_kernels[i - 1]));
  }
  return ops::concat(outs, 1);
}

#define TSI_INSTANTIATE_CTI(T)                                                                             \
  template struct CtiParams<T>;                                                                            \
  template CtiVars<T> bind<T>(Tape<T>&, CtiParams<T>&);                                                    \
  template std::vector<Var<T>> split_groups<T>(const Var<T>&, std::int64_t);                               \
  template Integration<T> cross_perception_integrate<T>(const Var<T>&, const Var<T>&, const Var<T>&,       \
                                                        const Var<T>&);                                    \
  template Var<T> temporal_conv<T>(const Var<T>&, std::int64_t, const Var<T>&);                            \
  template Var<T> cti_forward<T>(const Var<T>&, std::int64_t, const CtiVars<T>&, const CtiConfig&);

TSI_INSTANTIATE_CTI(float)
TSI_INSTANTIATE_CTI(double)

}  // namespace tsi
