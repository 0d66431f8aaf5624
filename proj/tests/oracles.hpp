#pragma once

// Direct-loop reference implementations. Plain index arithmetic over flat
// row-major buffers; nothing here calls into the library's ops or kernels.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "tsi/autograd.hpp"
#include "tsi/init.hpp"
#include "tsi/rng.hpp"
#include "tsi/tensor.hpp"

namespace oracle {

using tsi::Shape;
using Buf = tsi::Tensor<double>;
using i64 = std::int64_t;

inline Buf random(Shape s, std::uint64_t seed, double stddev = 1.0) {
  tsi::Rng rng(seed);
  return tsi::normal_tensor<double>(std::move(s), stddev, rng);
}

/// Evaluates an op chain on constants of a scratch tape and returns the value.
template <typename F>
Buf eval(F&& f) {
  tsi::Tape<double> tape;
  return f(tape).value();
}

inline double max_abs_diff(const Buf& a, const Buf& b) {
  if (a.shape() != b.shape()) return INFINITY;
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline Buf matmul(const Buf& a, const Buf& b) {
  const i64 m = a.dim(0), k = a.dim(1), p = b.dim(1);
  Buf c({m, p});
  for (i64 i = 0; i < m; ++i)
    for (i64 j = 0; j < p; ++j) {
      double s = 0.0;
      for (i64 q = 0; q < k; ++q) s += a[i * k + q] * b[q * p + j];
      c[i * p + j] = s;
    }
  return c;
}

inline Buf conv2d(const Buf& x, const Buf& w, i64 stride, i64 pad, i64 groups) {
  const i64 n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const i64 cout = w.dim(0), cpg = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  const i64 oh = (h + 2 * pad - kh) / stride + 1, ow = (wd + 2 * pad - kw) / stride + 1;
  const i64 opg = cout / groups;
  Buf y({n, cout, oh, ow});
  for (i64 b = 0; b < n; ++b)
    for (i64 o = 0; o < cout; ++o) {
      const i64 g = o / opg;
      for (i64 r = 0; r < oh; ++r)
        for (i64 c = 0; c < ow; ++c) {
          double s = 0.0;
          for (i64 ci = 0; ci < cpg; ++ci)
            for (i64 u = 0; u < kh; ++u)
              for (i64 v = 0; v < kw; ++v) {
                const i64 yy = r * stride - pad + u, xx = c * stride - pad + v;
                if (yy < 0 || yy >= h || xx < 0 || xx >= wd) continue;
                const i64 ic = g * cpg + ci;
                s += x[((b * cin + ic) * h + yy) * wd + xx] * w[((o * cpg + ci) * kh + u) * kw + v];
              }
          y[((b * cout + o) * oh + r) * ow + c] = s;
        }
    }
  (void)cin;
  return y;
}

/// x[N,C,L], w[C,k], zero padding k/2.
inline Buf conv1d(const Buf& x, const Buf& w) {
  const i64 n = x.dim(0), c = x.dim(1), len = x.dim(2), k = w.dim(1), half = k / 2;
  Buf y(x.shape());
  for (i64 b = 0; b < n; ++b)
    for (i64 ch = 0; ch < c; ++ch)
      for (i64 t = 0; t < len; ++t) {
        double s = 0.0;
        for (i64 j = 0; j < k; ++j) {
          const i64 src = t + j - half;
          if (src >= 0 && src < len) s += w[ch * k + j] * x[(b * c + ch) * len + src];
        }
        y[(b * c + ch) * len + t] = s;
      }
  return y;
}

inline double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

/// Softmax of each row of a [rows, cols] buffer.
inline Buf softmax_rows(const Buf& x) {
  const i64 rows = x.dim(0), cols = x.dim(1);
  Buf y(x.shape());
  for (i64 r = 0; r < rows; ++r) {
    double mx = -INFINITY;
    for (i64 c = 0; c < cols; ++c) mx = std::max(mx, x[r * cols + c]);
    double z = 0.0;
    for (i64 c = 0; c < cols; ++c) z += std::exp(x[r * cols + c] - mx);
    for (i64 c = 0; c < cols; ++c) y[r * cols + c] = std::exp(x[r * cols + c] - mx) / z;
  }
  return y;
}

/// One frame pair, x_t and x_next [d,H,W]. Returns the aligned map and fills `att` [HW,HW].
inline Buf saliency_align(const Buf& xt, const Buf& xn, bool multiply, Buf* att = nullptr) {
  const i64 d = xt.dim(0), hw = xt.dim(1) * xt.dim(2);
  Buf scores({hw, hw});
  for (i64 i = 0; i < hw; ++i)
    for (i64 j = 0; j < hw; ++j) {
      double s = 0.0;
      for (i64 c = 0; c < d; ++c) s += xt[c * hw + i] * xn[c * hw + j];
      scores[i * hw + j] = s / std::sqrt(static_cast<double>(d));
    }
  const Buf a = softmax_rows(scores);
  Buf out(xt.shape());
  for (i64 c = 0; c < d; ++c)
    for (i64 i = 0; i < hw; ++i) {
      double s = 0.0;
      for (i64 j = 0; j < hw; ++j) s += a[i * hw + j] * xn[c * hw + j];
      out[c * hw + i] = multiply ? xn[c * hw + i] * s : xn[c * hw + i] + s;
    }
  if (att) *att = a;
  return out;
}

/// Depthwise 3x3 (or kxk) conv of a single [d,H,W] map with kernels [d,1,k,k], padding k/2.
inline Buf depthwise(const Buf& x, const Buf& w) {
  Buf x4 = x.reshaped({1, x.dim(0), x.dim(1), x.dim(2)});
  return conv2d(x4, w, 1, w.dim(2) / 2, x.dim(0)).reshaped(x.shape());
}

inline Buf pyramidal_motion(const Buf& xt, const Buf& aligned, const std::vector<Buf>& kernels) {
  Buf m(xt.shape());
  Buf prev;
  for (std::size_t k = 0; k < kernels.size(); ++k) {
    Buf in = aligned;
    if (k > 0)
      for (std::size_t i = 0; i < in.numel(); ++i) in[i] += prev[i];
    prev = depthwise(in, kernels[k]);
    for (std::size_t i = 0; i < m.numel(); ++i) m[i] += prev[i] - xt[i];
  }
  return m;
}

/// Attention [C] of one motion map [d,H,W]; recover_proj [C,d,1,1], bias [C].
inline std::vector<double> motion_attention(const Buf& m, const Buf& recover, const Buf& bias) {
  const i64 d = m.dim(0), hw = m.dim(1) * m.dim(2), c = recover.dim(0);
  std::vector<double> pooled(d, 0.0);
  for (i64 j = 0; j < d; ++j) {
    for (i64 i = 0; i < hw; ++i) pooled[j] += m[j * hw + i];
    pooled[j] /= static_cast<double>(hw);
  }
  std::vector<double> att(c);
  for (i64 o = 0; o < c; ++o) {
    double s = bias[o];
    for (i64 j = 0; j < d; ++j) s += recover[o * d + j] * pooled[j];
    att[o] = sigmoid(s);
  }
  return att;
}

struct SmeWeights {
  Buf reduce;   // [d,C,1,1]
  std::vector<Buf> kernels;
  Buf recover;  // [C,d,1,1]
  Buf bias;     // [C]
};

/// x[T,C,H,W] for a single clip; pyramidal motion with the shared reduction.
inline Buf sme_forward(const Buf& x, const SmeWeights& w, bool multiply, bool pyramidal) {
  const i64 t_len = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3), d = w.reduce.dim(0), hw = h * wd;
  std::vector<Buf> reduced;
  for (i64 t = 0; t < t_len; ++t) {
    Buf r({d, h, wd});
    for (i64 o = 0; o < d; ++o)
      for (i64 i = 0; i < hw; ++i) {
        double s = 0.0;
        for (i64 ci = 0; ci < c; ++ci) s += w.reduce[o * c + ci] * x[(t * c + ci) * hw + i];
        r[o * hw + i] = s;
      }
    reduced.push_back(r);
  }
  Buf out(x.shape());
  for (i64 t = 0; t < t_len; ++t) {
    Buf m({d, h, wd});
    if (t + 1 < t_len) {
      const Buf aligned = saliency_align(reduced[t], reduced[t + 1], multiply);
      if (pyramidal) {
        m = pyramidal_motion(reduced[t], aligned, w.kernels);
      } else {
        const Buf dk = depthwise(aligned, w.kernels.front());
        for (std::size_t i = 0; i < m.numel(); ++i) m[i] = dk[i] - reduced[t][i];
      }
    }
    const auto att = motion_attention(m, w.recover, w.bias);
    for (i64 ch = 0; ch < c; ++ch)
      for (i64 i = 0; i < hw; ++i) {
        const double v = x[(t * c + ch) * hw + i];
        out[(t * c + ch) * hw + i] = v + v * att[ch];
      }
  }
  return out;
}

/// Cross-perception integration over [T,c,H,W] inputs. fc [2c,c], bias [2c].
/// `alpha` receives [T,c] weights of x_g.
inline Buf integrate(const Buf& t_prev, const Buf& x_g, const Buf& fc, const Buf& bias, Buf* alpha = nullptr) {
  const i64 t_len = x_g.dim(0), c = x_g.dim(1), hw = x_g.dim(2) * x_g.dim(3);
  Buf out(x_g.shape());
  Buf a({t_len, c});
  for (i64 t = 0; t < t_len; ++t) {
    std::vector<double> s(c, 0.0);
    for (i64 ch = 0; ch < c; ++ch) {
      for (i64 i = 0; i < hw; ++i) s[ch] += t_prev[(t * c + ch) * hw + i] + x_g[(t * c + ch) * hw + i];
      s[ch] /= static_cast<double>(hw);
    }
    for (i64 ch = 0; ch < c; ++ch) {
      double la = bias[ch], lb = bias[c + ch];
      for (i64 j = 0; j < c; ++j) {
        la += fc[ch * c + j] * s[j];
        lb += fc[(c + ch) * c + j] * s[j];
      }
      const double alpha_v = 1.0 / (1.0 + std::exp(lb - la));
      a[t * c + ch] = alpha_v;
      for (i64 i = 0; i < hw; ++i) {
        const std::size_t idx = (t * c + ch) * hw + i;
        out[idx] = alpha_v * x_g[idx] + (1.0 - alpha_v) * t_prev[idx];
      }
    }
  }
  if (alpha) *alpha = a;
  return out;
}

/// Temporal conv of one group [T,c,H,W] with w[c,k], each spatial position separately.
inline Buf temporal_conv(const Buf& x, const Buf& w) {
  const i64 t_len = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3), k = w.dim(1), half = k / 2;
  Buf y(x.shape());
  for (i64 ch = 0; ch < c; ++ch)
    for (i64 i = 0; i < hw; ++i)
      for (i64 t = 0; t < t_len; ++t) {
        double s = 0.0;
        for (i64 j = 0; j < k; ++j) {
          const i64 src = t + j - half;
          if (src >= 0 && src < t_len) s += w[ch * k + j] * x[(src * c + ch) * hw + i];
        }
        y[(t * c + ch) * hw + i] = s;
      }
  return y;
}

inline Buf group(const Buf& x, i64 g, i64 groups) {
  const i64 t_len = x.dim(0), c = x.dim(1) / groups, hw = x.dim(2) * x.dim(3);
  Buf y({t_len, c, x.dim(2), x.dim(3)});
  for (i64 t = 0; t < t_len; ++t)
    for (i64 ch = 0; ch < c; ++ch)
      for (i64 i = 0; i < hw; ++i) y[(t * c + ch) * hw + i] = x[(t * x.dim(1) + g * c + ch) * hw + i];
  return y;
}

enum class Integration { kCross, kIndependent, kAddition };

/// Single clip x[T,C,H,W]; kernels for groups 2..G, fc/bias for junctions 3..G.
inline Buf cti_forward(const Buf& x, i64 groups, const std::vector<Buf>& kernels, const std::vector<Buf>& fcs,
                       const std::vector<Buf>& biases, Integration mode = Integration::kCross) {
  const i64 t_len = x.dim(0), cc = x.dim(1), c = cc / groups, hw = x.dim(2) * x.dim(3);
  std::vector<Buf> outs{group(x, 0, groups)};
  for (i64 g = 1; g < groups; ++g) {
    Buf in = group(x, g, groups);
    if (g >= 2) {
      const Buf& prev = outs.back();
      if (mode == Integration::kCross) {
        in = integrate(prev, in, fcs[g - 2], biases[g - 2]);
      } else if (mode == Integration::kAddition) {
        for (std::size_t i = 0; i < in.numel(); ++i) in[i] += prev[i];
      }
    }
    outs.push_back(temporal_conv(in, kernels[g - 1]));
  }
  Buf y(x.shape());
  for (i64 g = 0; g < groups; ++g)
    for (i64 t = 0; t < t_len; ++t)
      for (i64 ch = 0; ch < c; ++ch)
        for (i64 i = 0; i < hw; ++i) y[(t * cc + g * c + ch) * hw + i] = outs[g][(t * c + ch) * hw + i];
  return y;
}

/// Per-channel batch statistics by two passes; biased variance for normalization.
inline Buf batch_norm_train(const Buf& x, const Buf& gamma, const Buf& beta, double eps) {
  const i64 n = x.dim(0), c = x.dim(1), hw = x.numel() / (n * c);
  Buf y(x.shape());
  for (i64 ch = 0; ch < c; ++ch) {
    double mean = 0.0;
    for (i64 b = 0; b < n; ++b)
      for (i64 i = 0; i < hw; ++i) mean += x[(b * c + ch) * hw + i];
    mean /= static_cast<double>(n * hw);
    double var = 0.0;
    for (i64 b = 0; b < n; ++b)
      for (i64 i = 0; i < hw; ++i) var += std::pow(x[(b * c + ch) * hw + i] - mean, 2);
    var /= static_cast<double>(n * hw);
    for (i64 b = 0; b < n; ++b)
      for (i64 i = 0; i < hw; ++i) {
        const std::size_t idx = (b * c + ch) * hw + i;
        y[idx] = gamma[ch] * (x[idx] - mean) / std::sqrt(var + eps) + beta[ch];
      }
  }
  return y;
}

}  // namespace oracle
