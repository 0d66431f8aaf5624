#pragma once

// Salient Motion Excitation.
//
// Input features arrive as [N*T, C, H, W] with the T frames of each clip
// contiguous. Channels are reduced by `reduction`, adjacent frames are aligned
// with scaled dot-product attention over spatial positions, motion is taken as
// the difference between recursively convolved aligned features and the
// current frame, and the pooled motion map gates the input channels:
//   out = x + x * sigmoid(recover(GAP(motion)))
// The final frame of every clip has no successor and uses an all-zero motion map.

#include <string>
#include <vector>

#include "tsi/autograd.hpp"
#include "tsi/rng.hpp"

namespace tsi {

enum class AlignmentOp { kMultiply, kAdd };
enum class MotionMode { kPyramidal, kSimple };

struct SmeConfig {
  std::int64_t channels = 0;
  std::int64_t reduction = 16;
  std::int64_t pyramid_depth = 4;
  std::int64_t motion_kernel_size = 3;
  AlignmentOp alignment = AlignmentOp::kMultiply;
  MotionMode motion = MotionMode::kPyramidal;
  /// When false, the frame subtracted in the motion difference gets its own reduction.
  bool share_reduction = true;

  std::int64_t reduced_channels() const { return channels / reduction; }
  /// Number of depthwise kernels: pyramid_depth, or 1 in simple mode.
  std::int64_t kernel_count() const { return motion == MotionMode::kPyramidal ? pyramid_depth : 1; }
  void validate() const;
};

template <typename T>
struct SmeParams {
  Parameter<T> reduce_proj;                   // [C/r, C, 1, 1]
  Parameter<T> motion_reduce_proj;            // [C/r, C, 1, 1], only without shared reduction
  std::vector<Parameter<T>> pyramid_kernels;  // each [C/r, 1, k, k]
  Parameter<T> recover_proj;                  // [C, C/r, 1, 1]
  Parameter<T> recover_bias;                  // [C]

  static SmeParams init(const SmeConfig& cfg, Rng& rng, const std::string& prefix = "sme");
  std::vector<Parameter<T>*> parameters();
  void validate(const SmeConfig& cfg) const;
};

/// SmeParams bound to a tape.
template <typename T>
struct SmeVars {
  Var<T> reduce_proj;
  Var<T> motion_reduce_proj;
  std::vector<Var<T>> pyramid_kernels;
  Var<T> recover_proj;
  Var<T> recover_bias;
};

template <typename T>
SmeVars<T> bind(Tape<T>& tape, SmeParams<T>& params);

template <typename T>
struct SaliencyAlignment {
  Var<T> aligned;    // [P, d, H, W]
  Var<T> attention;  // [P, HW, HW], rows sum to 1
};

/// x[B,C,H,W] -> [B,C/r,H,W] pointwise projection.
template <typename T>
Var<T> reduce_channels(const Var<T>& x, const Var<T>& reduce_proj);

/// Aligns x_next to x_t for P frame pairs, both [P, d, H, W]. Spatial positions
/// are tokens of dimension d; attention rows are softmax((q k^T)/sqrt(d)).
template <typename T>
SaliencyAlignment<T> saliency_align(const Var<T>& x_t, const Var<T>& x_next, AlignmentOp op);

/// D_1 = conv_1(aligned), D_k = conv_k(D_{k-1} + aligned), M = sum_k (D_k - x_t).
template <typename T>
Var<T> pyramidal_motion(const Var<T>& x_t, const Var<T>& aligned, const std::vector<Var<T>>& kernels);

/// M = conv_1(aligned) - x_t.
template <typename T>
Var<T> simple_motion(const Var<T>& x_t, const Var<T>& aligned, const Var<T>& kernel);

/// sigmoid(recover(GAP(m))) for a motion map m[B, C/r, H, W] -> [B, C, 1, 1].
template <typename T>
Var<T> motion_attention(const Var<T>& motion, const Var<T>& recover_proj, const Var<T>& recover_bias);

/// Per-frame channel attention [N*T, C, 1, 1] for x[N*T, C, H, W].
template <typename T>
Var<T> sme_attention(const Var<T>& x, std::int64_t frames, const SmeVars<T>& w, const SmeConfig& cfg);

/// x + x * attention.
template <typename T>
Var<T> sme_forward(const Var<T>& x, std::int64_t frames, const SmeVars<T>& w, const SmeConfig& cfg);

}  // namespace tsi
