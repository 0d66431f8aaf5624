#pragma once

// Differentiable primitives. Each op evaluates eagerly, records its result on
// the operands' tape, and registers the adjoint used by Tape::backward().

#include <cstdint>
#include <span>
#include <vector>

#include "tsi/autograd.hpp"

namespace tsi::ops {

// Elementwise binary ops with numpy-style broadcasting.
template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> scale(const Var<T>& a, T factor);

template <typename T>
Var<T> relu(const Var<T>& x);
template <typename T>
Var<T> sigmoid(const Var<T>& x);

/// Softmax along `axis`, computed on max-shifted logits.
template <typename T>
Var<T> softmax(const Var<T>& x, std::int64_t axis);

/// Sum of all elements as a rank-0 tensor.
template <typename T>
Var<T> sum(const Var<T>& x);
template <typename T>
Var<T> mean(const Var<T>& x);

/// Mean over `axis`; the axis is removed from the result.
template <typename T>
Var<T> mean_axis(const Var<T>& x, std::int64_t axis);

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape);
template <typename T>
Var<T> permute(const Var<T>& x, const std::vector<std::size_t>& perm);

/// Contiguous sub-range [start, start+length) along `axis`.
template <typename T>
Var<T> slice(const Var<T>& x, std::int64_t axis, std::int64_t start, std::int64_t length);
template <typename T>
Var<T> concat(const std::vector<Var<T>>& xs, std::int64_t axis);

/// Batched a[...,M,K] x b[...,K,P] with broadcast leading dims.
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b);

/// Grouped 2D convolution, x[N,Cin,H,W], w[Cout,Cin/groups,kh,kw], zero padding.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, std::int64_t stride = 1, std::int64_t padding = 0,
              std::int64_t groups = 1);

/// Depthwise temporal convolution, x[N,C,L], w[C,k] with odd k; zero padding keeps L.
template <typename T>
Var<T> conv1d_temporal(const Var<T>& x, const Var<T>& w);

/// [N,C,H,W] -> [N,C,1,1] spatial mean.
template <typename T>
Var<T> global_avg_pool_spatial(const Var<T>& x);

/// Affine map on the last axis: x[...,Din], w[Dout,Din], optional bias[Dout].
template <typename T>
Var<T> fully_connected(const Var<T>& x, const Var<T>& w, const Var<T>& bias = {});

template <typename T>
Var<T> max_pool2d(const Var<T>& x, std::int64_t kernel, std::int64_t stride, std::int64_t padding);

enum class NormMode { kTrain, kEval };

template <typename T>
struct BatchNormStats {
  Tensor<T> running_mean;
  Tensor<T> running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);

  BatchNormStats() = default;
  explicit BatchNormStats(std::int64_t channels)
      : running_mean(Shape{channels}, T(0)), running_var(Shape{channels}, T(1)) {}
};

/// Per-channel normalization of x[N,C,...]. Train mode normalizes with batch
/// statistics and updates `stats` (unbiased running variance); eval mode uses `stats`.
template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, BatchNormStats<T>& stats, NormMode mode);

/// Mean softmax cross-entropy of logits[N,K] against integer labels.
template <typename T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const int> labels);

/// Broadcast result shape, throwing ShapeError naming the conflicting axes.
Shape broadcast_shape(const Shape& a, const Shape& b);

}  // namespace tsi::ops
