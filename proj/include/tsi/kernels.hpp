#pragma once

// Raw forward/backward compute kernels shared by the differentiable ops.
// Every multiply-accumulate performed by gemm and the convolution kernels is
// tallied in a process-wide counter while a MacCounter scope is active.

#include <cstdint>

#include "tsi/tensor.hpp"

namespace tsi::kernels {

/// Counts multiply-accumulates executed by matmul/convolution kernels while alive.
/// Scopes nest; the innermost scope receives the counts.
class MacCounter {
 public:
  MacCounter();
  ~MacCounter();
  MacCounter(const MacCounter&) = delete;
  MacCounter& operator=(const MacCounter&) = delete;

  std::uint64_t macs() const { return macs_; }

 private:
  friend void add_macs(std::uint64_t);
  std::uint64_t macs_ = 0;
  MacCounter* outer_ = nullptr;
};

void add_macs(std::uint64_t n);

/// Row-major C[M,N] (+)= op(A) * op(B), op(A) is MxK and op(B) is KxN.
/// With trans_a, A is stored KxM; with trans_b, B is stored NxK.
template <typename T>
void gemm(std::int64_t m, std::int64_t n, std::int64_t k, const T* a, bool trans_a, const T* b, bool trans_b, T* c,
          bool accumulate);

struct Conv2dGeometry {
  std::int64_t batch, in_channels, height, width;
  std::int64_t out_channels, kernel_h, kernel_w;
  std::int64_t stride, padding, groups;
  std::int64_t out_height() const { return (height + 2 * padding - kernel_h) / stride + 1; }
  std::int64_t out_width() const { return (width + 2 * padding - kernel_w) / stride + 1; }
};

/// Validates shapes and returns the geometry for x[N,Cin,H,W] and w[Cout,Cin/groups,kh,kw].
Conv2dGeometry conv2d_geometry(const Shape& x, const Shape& w, std::int64_t stride, std::int64_t padding,
                               std::int64_t groups);

template <typename T>
void conv2d_forward(const Conv2dGeometry& g, const T* x, const T* w, T* y);

/// Accumulates into gx (if non-null) and gw (if non-null).
template <typename T>
void conv2d_backward(const Conv2dGeometry& g, const T* x, const T* w, const T* gy, T* gx, T* gw);

/// Depthwise 1D convolution over x[N,C,L] with w[C,k], zero padding k/2 on both sides.
template <typename T>
void conv1d_depthwise_forward(std::int64_t n, std::int64_t c, std::int64_t len, std::int64_t k, const T* x, const T* w,
                              T* y);

template <typename T>
void conv1d_depthwise_backward(std::int64_t n, std::int64_t c, std::int64_t len, std::int64_t k, const T* x,
                               const T* w, const T* gy, T* gx, T* gw);

}  // namespace tsi::kernels
