#pragma once

// Cross-perception Temporal Integration.
//
// Channels are split into G contiguous groups. Group 1 passes through, group 2
// is convolved along time, and every later group is convolved after being
// fused with its predecessor's output:
//   T_1 = X_1, T_2 = conv_2(X_2), T_g = conv_g(CI(T_{g-1}, X_g))
// CI mixes the two inputs with per-frame, per-channel weights a and 1-a that
// come from a two-way softmax over an affine map of their pooled sum.

#include <string>
#include <vector>

#include "tsi/autograd.hpp"
#include "tsi/rng.hpp"

namespace tsi {

enum class IntegrationMode { kCrossAttention, kIndependent, kAddition };

struct CtiConfig {
  std::int64_t channels = 0;
  std::int64_t groups = 4;
  std::int64_t temporal_kernel_size = 3;
  IntegrationMode integration = IntegrationMode::kCrossAttention;

  std::int64_t group_channels() const { return channels / groups; }
  void validate() const;
};

template <typename T>
struct CtiParams {
  std::vector<Parameter<T>> temporal_kernels;  // groups 2..G, each [C/G, k]
  std::vector<Parameter<T>> integration_fc;    // junctions 3..G, each [2C/G, C/G]
  std::vector<Parameter<T>> integration_bias;  // junctions 3..G, each [2C/G]

  /// Temporal kernels start as center-tap identities, FC weights small and random.
  static CtiParams init(const CtiConfig& cfg, Rng& rng, const std::string& prefix = "cti");
  std::vector<Parameter<T>*> parameters();
  void validate(const CtiConfig& cfg) const;
};

template <typename T>
struct CtiVars {
  std::vector<Var<T>> temporal_kernels;
  std::vector<Var<T>> integration_fc;
  std::vector<Var<T>> integration_bias;
};

template <typename T>
CtiVars<T> bind(Tape<T>& tape, CtiParams<T>& params);

template <typename T>
struct Integration {
  Var<T> out;    // [B, c, H, W]
  Var<T> alpha;  // [B, c, 1, 1], weight of x_g
  Var<T> beta;   // [B, c, 1, 1], weight of t_prev; alpha + beta = 1
};

/// Contiguous channel slices of x[B,C,H,W].
template <typename T>
std::vector<Var<T>> split_groups(const Var<T>& x, std::int64_t groups);

/// fc_weight [2c, c], fc_bias [2c]; logits are laid out as [alpha-candidate | beta-candidate].
template <typename T>
Integration<T> cross_perception_integrate(const Var<T>& t_prev, const Var<T>& x_g, const Var<T>& fc_weight,
                                          const Var<T>& fc_bias);

/// Depthwise temporal convolution of x[N*T, c, H, W] with w[c, k], each spatial position independently.
template <typename T>
Var<T> temporal_conv(const Var<T>& x, std::int64_t frames, const Var<T>& w);

template <typename T>
Var<T> cti_forward(const Var<T>& x, std::int64_t frames, const CtiVars<T>& w, const CtiConfig& cfg);

}  // namespace tsi
