#include "tsi/kernels.hpp"

#include <algorithm>
#include <vector>

namespace tsi::kernels {

namespace {
thread_local MacCounter* t_counter = nullptr;
}  // namespace

MacCounter::MacCounter() : outer_(t_counter) { t_counter = this; }
MacCounter::~MacCounter() { t_counter = outer_; }

void add_macs(std::uint64_t n) {
  if (t_counter) t_counter->macs_ += n;
}

namespace {

template <typename T>
void transpose(std::int64_t rows, std::int64_t cols, const T* src, T* dst) {
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
}

template <typename T>
void gemm_nn(std::int64_t m, std::int64_t n, std::int64_t k, const T* __restrict a, const T* __restrict b,
             T* __restrict c) {
  for (std::int64_t i = 0; i < m; ++i) {
    T* __restrict crow = c + i * n;
    const T* arow = a + i * k;
    for (std::int64_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* __restrict brow = b + p * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
void gemm_tn(std::int64_t m, std::int64_t n, std::int64_t k, const T* __restrict a, const T* __restrict b,
             T* __restrict c) {
  for (std::int64_t p = 0; p < k; ++p) {
    const T* arow = a + p * m;
    const T* __restrict brow = b + p * n;
    for (std::int64_t i = 0; i < m; ++i) {
      const T av = arow[i];
      T* __restrict crow = c + i * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
void im2col(const Conv2dGeometry& g, const T* x, T* col) {
  const std::int64_t ho = g.out_height(), wo = g.out_width();
  const std::int64_t cin = g.in_channels / g.groups;
  for (std::int64_t ci = 0; ci < cin; ++ci) {
    const T* xc = x + ci * g.height * g.width;
    for (std::int64_t ky = 0; ky < g.kernel_h; ++ky) {
      for (std::int64_t kx = 0; kx < g.kernel_w; ++kx) {
        T* dst = col + ((ci * g.kernel_h + ky) * g.kernel_w + kx) * ho * wo;
        for (std::int64_t oy = 0; oy < ho; ++oy) {
          const std::int64_t iy = oy * g.stride - g.padding + ky;
          T* drow = dst + oy * wo;
          if (iy < 0 || iy >= g.height) {
            std::fill(drow, drow + wo, T(0));
            continue;
          }
          const T* xrow = xc + iy * g.width;
          for (std::int64_t ox = 0; ox < wo; ++ox) {
            const std::int64_t ix = ox * g.stride - g.padding + kx;
            drow[ox] = (ix >= 0 && ix < g.width) ? xrow[ix] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const Conv2dGeometry& g, const T* col, T* x) {
  const std::int64_t ho = g.out_height(), wo = g.out_width();
  const std::int64_t cin = g.in_channels / g.groups;
  for (std::int64_t ci = 0; ci < cin; ++ci) {
    T* xc = x + ci * g.height * g.width;
    for (std::int64_t ky = 0; ky < g.kernel_h; ++ky) {
      for (std::int64_t kx = 0; kx < g.kernel_w; ++kx) {
        const T* src = col + ((ci * g.kernel_h + ky) * g.kernel_w + kx) * ho * wo;
        for (std::int64_t oy = 0; oy < ho; ++oy) {
          const std::int64_t iy = oy * g.stride - g.padding + ky;
          if (iy < 0 || iy >= g.height) continue;
          T* xrow = xc + iy * g.width;
          const T* srow = src + oy * wo;
          for (std::int64_t ox = 0; ox < wo; ++ox) {
            const std::int64_t ix = ox * g.stride - g.padding + kx;
            if (ix >= 0 && ix < g.width) xrow[ix] += srow[ox];
          }
        }
      }
    }
  }
}

bool is_pointwise(const Conv2dGeometry& g) {
  return g.kernel_h == 1 && g.kernel_w == 1 && g.stride == 1 && g.padding == 0;
}

bool is_depthwise(const Conv2dGeometry& g) {
  return g.groups == g.in_channels && g.out_channels == g.in_channels && g.groups > 1;
}

template <typename T>
void depthwise_forward(const Conv2dGeometry& g, const T* x, const T* w, T* y) {
  const std::int64_t ho = g.out_height(), wo = g.out_width();
  const std::int64_t kh = g.kernel_h, kw = g.kernel_w;
  for (std::int64_t n = 0; n < g.batch; ++n) {
    for (std::int64_t c = 0; c < g.in_channels; ++c) {
      const T* xc = x + (n * g.in_channels + c) * g.height * g.width;
      const T* wc = w + c * kh * kw;
      T* yc = y + (n * g.in_channels + c) * ho * wo;
      for (std::int64_t oy = 0; oy < ho; ++oy) {
        for (std::int64_t ox = 0; ox < wo; ++ox) {
          T acc = 0;
          for (std::int64_t ky = 0; ky < kh; ++ky) {
            const std::int64_t iy = oy * g.stride - g.padding + ky;
            if (iy < 0 || iy >= g.height) continue;
            for (std::int64_t kx = 0; kx < kw; ++kx) {
              const std::int64_t ix = ox * g.stride - g.padding + kx;
              if (ix < 0 || ix >= g.width) continue;
              acc += wc[ky * kw + kx] * xc[iy * g.width + ix];
            }
          }
          yc[oy * wo + ox] = acc;
        }
      }
    }
  }
}

template <typename T>
void depthwise_backward(const Conv2dGeometry& g, const T* x, const T* w, const T* gy, T* gx, T* gw) {
  const std::int64_t ho = g.out_height(), wo = g.out_width();
  const std::int64_t kh = g.kernel_h, kw = g.kernel_w;
  for (std::int64_t n = 0; n < g.batch; ++n) {
    for (std::int64_t c = 0; c < g.in_channels; ++c) {
      const std::int64_t xoff = (n * g.in_channels + c) * g.height * g.width;
      const T* wc = w + c * kh * kw;
      const T* gyc = gy + (n * g.in_channels + c) * ho * wo;
      for (std::int64_t oy = 0; oy < ho; ++oy) {
        for (std::int64_t ox = 0; ox < wo; ++ox) {
          const T go = gyc[oy * wo + ox];
          for (std::int64_t ky = 0; ky < kh; ++ky) {
            const std::int64_t iy = oy * g.stride - g.padding + ky;
            if (iy < 0 || iy >= g.height) continue;
            for (std::int64_t kx = 0; kx < kw; ++kx) {
              const std::int64_t ix = ox * g.stride - g.padding + kx;
              if (ix < 0 || ix >= g.width) continue;
              const std::int64_t xi = xoff + iy * g.width + ix;
              if (gx) gx[xi] += wc[ky * kw + kx] * go;
              if (gw) gw[c * kh * kw + ky * kw + kx] += x[xi] * go;
            }
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
void gemm(std::int64_t m, std::int64_t n, std::int64_t k, const T* a, bool trans_a, const T* b, bool trans_b, T* c,
          bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, T(0));
  add_macs(static_cast<std::uint64_t>(m * n * k));
  std::vector<T> bt;
  if (trans_b) {
    bt.resize(static_cast<std::size_t>(k * n));
    transpose(n, k, b, bt.data());
    b = bt.data();
  }
  if (trans_a) {
    gemm_tn(m, n, k, a, b, c);
  } else {
    gemm_nn(m, n, k, a, b, c);
  }
}

Conv2dGeometry conv2d_geometry(const Shape& x, const Shape& w, std::int64_t stride, std::int64_t padding,
                               std::int64_t groups) {
  if (x.size() != 4) throw ShapeError("conv2d expects input [N,C,H,W], got " + shape_str(x));
  if (w.size() != 4) throw ShapeError("conv2d expects kernel [Cout,Cin/groups,kh,kw], got " + shape_str(w));
  if (groups < 1 || x[1] % groups != 0 || w[0] % groups != 0) {
    throw ConfigError("conv2d: channels (in " + std::to_string(x[1]) + ", out " + std::to_string(w[0]) +
                      ") not divisible by groups " + std::to_string(groups));
  }
  if (w[1] != x[1] / groups) {
    throw ShapeError("conv2d: kernel input channels " + std::to_string(w[1]) + " (axis 1 of " + shape_str(w) +
                     ") do not match input channels/groups " + std::to_string(x[1] / groups));
  }
  if (stride < 1 || padding < 0) throw ConfigError("conv2d: stride must be >= 1 and padding >= 0");
  Conv2dGeometry g{x[0], x[1], x[2], x[3], w[0], w[2], w[3], stride, padding, groups};
  if (x[2] + 2 * padding < w[2] || x[3] + 2 * padding < w[3]) {
    throw ShapeError("conv2d: kernel " + shape_str(w) + " larger than padded input " + shape_str(x));
  }
  return g;
}

template <typename T>
void conv2d_forward(const Conv2dGeometry& g, const T* x, const T* w, T* y) {
  const std::int64_t ho = g.out_height(), wo = g.out_width();
  if (is_depthwise(g)) {
    add_macs(static_cast<std::uint64_t>(g.batch * g.out_channels * ho * wo * g.kernel_h * g.kernel_w));
    depthwise_forward(g, x, w, y);
    return;
  }
  const std::int64_t cin = g.in_channels / g.groups, cout = g.out_channels / g.groups;
  const std::int64_t ck = cin * g.kernel_h * g.kernel_w;
  const bool pointwise = is_pointwise(g);
  std::vector<T> col(pointwise ? 0 : static_cast<std::size_t>(ck * ho * wo));
  for (std::int64_t n = 0; n < g.batch; ++n) {
    for (std::int64_t gr = 0; gr < g.groups; ++gr) {
      const T* xg = x + (n * g.in_channels + gr * cin) * g.height * g.width;
      const T* colp = xg;
      if (!pointwise) {
        im2col(g, xg, col.data());
        colp = col.data();
      }
      gemm(cout, ho * wo, ck, w + gr * cout * ck, false, colp, false, y + (n * g.out_channels + gr * cout) * ho * wo,
           false);
    }
  }
}

template <typename T>
void conv2d_backward(const Conv2dGeometry& g, const T* x, const T* w, const T* gy, T* gx, T* gw) {
  if (is_depthwise(g)) {
    depthwise_backward(g, x, w, gy, gx, gw);
    return;
  }
  const std::int64_t ho = g.out_height(), wo = g.out_width();
  const std::int64_t cin = g.in_channels / g.groups, cout = g.out_channels / g.groups;
  const std::int64_t ck = cin * g.kernel_h * g.kernel_w;
  const bool pointwise = is_pointwise(g);
  std::vector<T> col(pointwise ? 0 : static_cast<std::size_t>(ck * ho * wo));
  std::vector<T> gcol(static_cast<std::size_t>(ck * ho * wo));
  for (std::int64_t n = 0; n < g.batch; ++n) {
    for (std::int64_t gr = 0; gr < g.groups; ++gr) {
      const std::int64_t xoff = (n * g.in_channels + gr * cin) * g.height * g.width;
      const T* gyg = gy + (n * g.out_channels + gr * cout) * ho * wo;
      const T* wg = w + gr * cout * ck;
      if (gw) {
        const T* colp = x + xoff;
        if (!pointwise) {
          im2col(g, x + xoff, col.data());
          colp = col.data();
        }
        gemm(cout, ck, ho * wo, gyg, false, colp, true, gw + gr * cout * ck, true);
      }
      if (gx) {
        if (pointwise) {
          gemm(ck, ho * wo, cout, wg, true, gyg, false, gx + xoff, true);
        } else {
          gemm(ck, ho * wo, cout, wg, true, gyg, false, gcol.data(), false);
          col2im(g, gcol.data(), gx + xoff);
        }
      }
    }
  }
}

template <typename T>
void conv1d_depthwise_forward(std::int64_t n, std::int64_t c, std::int64_t len, std::int64_t k, const T* x, const T* w,
                              T* y) {
  add_macs(static_cast<std::uint64_t>(n * c * len * k));
  const std::int64_t pad = k / 2;
  for (std::int64_t b = 0; b < n; ++b) {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const T* xs = x + (b * c + ch) * len;
      const T* wk = w + ch * k;
      T* ys = y + (b * c + ch) * len;
      for (std::int64_t t = 0; t < len; ++t) {
        T acc = 0;
        for (std::int64_t j = 0; j < k; ++j) {
          const std::int64_t s = t - pad + j;
          if (s >= 0 && s < len) acc += wk[j] * xs[s];
        }
        ys[t] = acc;
      }
    }
  }
}

template <typename T>
void conv1d_depthwise_backward(std::int64_t n, std::int64_t c, std::int64_t len, std::int64_t k, const T* x,
                               const T* w, const T* gy, T* gx, T* gw) {
  const std::int64_t pad = k / 2;
  for (std::int64_t b = 0; b < n; ++b) {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const std::int64_t off = (b * c + ch) * len;
      for (std::int64_t t = 0; t < len; ++t) {
        const T go = gy[off + t];
        for (std::int64_t j = 0; j < k; ++j) {
          const std::int64_t s = t - pad + j;
          if (s < 0 || s >= len) continue;
          if (gx) gx[off + s] += w[ch * k + j] * go;
          if (gw) gw[ch * k + j] += x[off + s] * go;
        }
      }
    }
  }
}

#define TSI_INSTANTIATE_KERNELS(T)                                                                                 \
  template void gemm<T>(std::int64_t, std::int64_t, std::int64_t, const T*, bool, const T*, bool, T*, bool);       \
  template void conv2d_forward<T>(const Conv2dGeometry&, const T*, const T*, T*);                                  \
  template void conv2d_backward<T>(const Conv2dGeometry&, const T*, const T*, const T*, T*, T*);                   \
  template void conv1d_depthwise_forward<T>(std::int64_t, std::int64_t, std::int64_t, std::int64_t, const T*,      \
                                            const T*, T*);                                                         \
  template void conv1d_depthwise_backward<T>(std::int64_t, std::int64_t, std::int64_t, std::int64_t, const T*,     \
                                             const T*, const T*, T*, T*);

TSI_INSTANTIATE_KERNELS(float)
TSI_INSTANTIATE_KERNELS(double)

}  // namespace tsi::kernels
