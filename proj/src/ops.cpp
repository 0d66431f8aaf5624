#include "tsi/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "tsi/kernels.hpp"

namespace tsi::ops {

namespace {

std::vector<std::int64_t> contiguous_strides(const Shape& s) {
  std::vector<std::int64_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

// Broadcast iteration with dimensions coalesced so the innermost run is as
// long as possible. Strides are zero on broadcast axes.
struct BroadcastPlan {
  Shape out;
  std::vector<std::int64_t> dims;
  std::vector<std::int64_t> sa, sb;
};

BroadcastPlan make_plan(const Shape& a, const Shape& b) {
  BroadcastPlan p;
  p.out = broadcast_shape(a, b);
  const std::size_t r = p.out.size();
  Shape pa(r, 1), pb(r, 1);
  std::copy(a.begin(), a.end(), pa.begin() + static_cast<std::ptrdiff_t>(r - a.size()));
  std::copy(b.begin(), b.end(), pb.begin() + static_cast<std::ptrdiff_t>(r - b.size()));
  auto sta = contiguous_strides(pa), stb = contiguous_strides(pb);
  for (std::size_t i = 0; i < r; ++i) {
    if (p.out[i] == 1) continue;
    const std::int64_t sa = pa[i] == 1 ? 0 : sta[i];
    const std::int64_t sb = pb[i] == 1 ? 0 : stb[i];
    if (!p.dims.empty() && p.sa.back() == sa * p.out[i] && p.sb.back() == sb * p.out[i]) {
      p.dims.back() *= p.out[i];
      p.sa.back() = sa;
      p.sb.back() = sb;
    } else {
      p.dims.push_back(p.out[i]);
      p.sa.push_back(sa);
      p.sb.push_back(sb);
    }
  }
  if (p.dims.empty()) {
    p.dims.push_back(1);
    p.sa.push_back(0);
    p.sb.push_back(0);
  }
  return p;
}

// Calls f(out_offset, a_offset, b_offset, run_length, a_stride, b_stride) per innermost run.
template <typename F>
void for_each_run(const BroadcastPlan& p, F&& f) {
  const std::size_t r = p.dims.size();
  const std::int64_t inner = p.dims.back();
  std::vector<std::int64_t> idx(r, 0);
  std::int64_t out_off = 0, a_off = 0, b_off = 0;
  while (true) {
    f(out_off, a_off, b_off, inner, p.sa.back(), p.sb.back());
    out_off += inner;
    std::size_t d = r - 1;
    bool done = true;
    while (d-- > 0) {
      ++idx[d];
      a_off += p.sa[d];
      b_off += p.sb[d];
      if (idx[d] < p.dims[d]) {
        done = false;
        break;
      }
      a_off -= p.sa[d] * p.dims[d];
      b_off -= p.sb[d] * p.dims[d];
      idx[d] = 0;
    }
    if (done) break;
  }
}

template <typename T, typename F>
Tensor<T> broadcast_apply(const BroadcastPlan& p, const Tensor<T>& a, const Tensor<T>& b, F op) {
  Tensor<T> out(p.out);
  T* o = out.raw();
  const T* pa = a.raw();
  const T* pb = b.raw();
  for_each_run(p, [&](std::int64_t oo, std::int64_t ao, std::int64_t bo, std::int64_t n, std::int64_t sa,
                      std::int64_t sb) {
    for (std::int64_t j = 0; j < n; ++j) o[oo + j] = op(pa[ao + j * sa], pb[bo + j * sb]);
  });
  return out;
}

// Reduces an output-shaped adjoint onto operand a (which == 0) or b (which == 1),
// optionally multiplied by the other operand.
template <typename T>
void reduce_into(const BroadcastPlan& p, int which, const Tensor<T>& g, const Tensor<T>* other, Tensor<T>& dst) {
  T* d = dst.raw();
  const T* gp = g.raw();
  const T* op = other ? other->raw() : nullptr;
  for_each_run(p, [&](std::int64_t oo, std::int64_t ao, std::int64_t bo, std::int64_t n, std::int64_t sa,
                      std::int64_t sb) {
    const std::int64_t self_off = which == 0 ? ao : bo, self_s = which == 0 ? sa : sb;
    const std::int64_t oth_off = which == 0 ? bo : ao, oth_s = which == 0 ? sb : sa;
    if (op) {
      for (std::int64_t j = 0; j < n; ++j) d[self_off + j * self_s] += gp[oo + j] * op[oth_off + j * oth_s];
    } else {
      for (std::int64_t j = 0; j < n; ++j) d[self_off + j * self_s] += gp[oo + j];
    }
  });
}

template <typename T>
Tape<T>& same_tape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (!a.valid() || !b.valid() || &a.tape() != &b.tape()) {
    throw ContractError(std::string(op) + ": operands must live on the same tape");
  }
  return a.tape();
}

struct AxisSplit {
  std::int64_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.n = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::int64_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::int64_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b) + ": axis " + std::to_string(i) +
                       " has sizes " + std::to_string(da) + " and " + std::to_string(db));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  Tape<T>& tape = same_tape(a, b, "add");
  auto plan = make_plan(a.shape(), b.shape());
  auto out = broadcast_apply(plan, a.value(), b.value(), [](T x, T y) { return x + y; });
  return tape.record("add", std::move(out), {a, b}, [a, b, plan](const Tensor<T>& g, const Tensor<T>&) {
    Tape<T>& t = a.tape();
    if (auto* ga = t.grad_buffer(a)) reduce_into(plan, 0, g, static_cast<const Tensor<T>*>(nullptr), *ga);
    if (auto* gb = t.grad_buffer(b)) reduce_into(plan, 1, g, static_cast<const Tensor<T>*>(nullptr), *gb);
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  Tape<T>& tape = same_tape(a, b, "sub");
  auto plan = make_plan(a.shape(), b.shape());
  auto out = broadcast_apply(plan, a.value(), b.value(), [](T x, T y) { return x - y; });
  return tape.record("sub", std::move(out), {a, b}, [a, b, plan](const Tensor<T>& g, const Tensor<T>&) {
    Tape<T>& t = a.tape();
    if (auto* ga = t.grad_buffer(a)) reduce_into(plan, 0, g, static_cast<const Tensor<T>*>(nullptr), *ga);
    if (auto* gb = t.grad_buffer(b)) {
      Tensor<T> neg = g;
      for (auto& v : neg.data()) v = -v;
      reduce_into(plan, 1, neg, static_cast<const Tensor<T>*>(nullptr), *gb);
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  Tape<T>& tape = same_tape(a, b, "mul");
  auto plan = make_plan(a.shape(), b.shape());
  auto out = broadcast_apply(plan, a.value(), b.value(), [](T x, T y) { return x * y; });
  return tape.record("mul", std::move(out), {a, b}, [a, b, plan](const Tensor<T>& g, const Tensor<T>&) {
    Tape<T>& t = a.tape();
    if (auto* ga = t.grad_buffer(a)) reduce_into(plan, 0, g, &b.value(), *ga);
    if (auto* gb = t.grad_buffer(b)) reduce_into(plan, 1, g, &a.value(), *gb);
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T factor) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v *= factor;
  return a.tape().record("scale", std::move(out), {a}, [a, factor](const Tensor<T>& g, const Tensor<T>&) {
    Tensor<T> ga = g;
    for (auto& v : ga.data()) v *= factor;
    a.tape().accumulate(a, std::move(ga));
  });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (auto& v : out.data()) v = v > T(0) ? v : T(0);
  return x.tape().record("relu", std::move(out), {x}, [x](const Tensor<T>& g, const Tensor<T>&) {
    Tensor<T> gx = g;
    const auto xv = x.value().data();
    auto gd = gx.data();
    for (std::size_t i = 0; i < gd.size(); ++i)
      if (!(xv[i] > T(0))) gd[i] = T(0);
    x.tape().accumulate(x, std::move(gx));
  });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  // Saturates at the representable neighbours of 0 and 1 so outputs stay in (0,1).
  constexpr T lo = std::numeric_limits<T>::min();
  const T hi = std::nextafter(T(1), T(0));
  Tensor<T> out = x.value();
  for (auto& v : out.data()) {
    T s;
    if (v >= T(0)) {
      s = T(1) / (T(1) + std::exp(-v));
    } else {
      const T e = std::exp(v);
      s = e / (T(1) + e);
    }
    v = std::clamp(s, lo, hi);
  }
  return x.tape().record("sigmoid", std::move(out), {x}, [x](const Tensor<T>& g, const Tensor<T>& y) {
    Tensor<T> gx = g;
    const auto yv = y.data();
    auto gd = gx.data();
    for (std::size_t i = 0; i < gd.size(); ++i) gd[i] *= yv[i] * (T(1) - yv[i]);
    x.tape().accumulate(x, std::move(gx));
  });
}

template <typename T>
Var<T> softmax(const Var<T>& x, std::int64_t axis) {
  const auto ax = normalize_axis(axis, x.value().ndim());
  const AxisSplit s = split_at(x.shape(), ax);
  constexpr T lo = std::numeric_limits<T>::min();
  Tensor<T> out(x.shape());
  const T* xv = x.value().raw();
  T* o = out.raw();
  for (std::int64_t a = 0; a < s.outer; ++a) {
    for (std::int64_t c = 0; c < s.inner; ++c) {
      const std::int64_t base = a * s.n * s.inner + c;
      T mx = xv[base];
      for (std::int64_t i = 1; i < s.n; ++i) mx = std::max(mx, xv[base + i * s.inner]);
      T total = 0;
      for (std::int64_t i = 0; i < s.n; ++i) {
        const T e = std::exp(xv[base + i * s.inner] - mx);
        o[base + i * s.inner] = e;
        total += e;
      }
      const T inv = T(1) / total;
      for (std::int64_t i = 0; i < s.n; ++i) o[base + i * s.inner] = std::max(o[base + i * s.inner] * inv, lo);
    }
  }
  return x.tape().record("softmax", std::move(out), {x}, [x, s](const Tensor<T>& g, const Tensor<T>& y) {
    Tensor<T>* gx = x.tape().grad_buffer(x);
    if (!gx) return;
    const T* yv = y.raw();
    const T* gp = g.raw();
    T* d = gx->raw();
    for (std::int64_t a = 0; a < s.outer; ++a) {
      for (std::int64_t c = 0; c < s.inner; ++c) {
        const std::int64_t base = a * s.n * s.inner + c;
        T dot = 0;
        for (std::int64_t i = 0; i < s.n; ++i) dot += gp[base + i * s.inner] * yv[base + i * s.inner];
        for (std::int64_t i = 0; i < s.n; ++i) {
          const std::int64_t k = base + i * s.inner;
          d[k] += yv[k] * (gp[k] - dot);
        }
      }
    }
  });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  T total = 0;
  for (T v : x.value().data()) total += v;
  return x.tape().record("sum", Tensor<T>::scalar(total), {x}, [x](const Tensor<T>& g, const Tensor<T>&) {
    x.tape().accumulate(x, Tensor<T>(x.shape(), g.item()));
  });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.value().numel()));
}

template <typename T>
Var<T> mean_axis(const Var<T>& x, std::int64_t axis) {
  const auto ax = normalize_axis(axis, x.value().ndim());
  const AxisSplit s = split_at(x.shape(), ax);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
  Tensor<T> out(out_shape);
  const T* xv = x.value().raw();
  const T inv = T(1) / static_cast<T>(s.n);
  for (std::int64_t a = 0; a < s.outer; ++a)
    for (std::int64_t i = 0; i < s.n; ++i)
      for (std::int64_t c = 0; c < s.inner; ++c) out[a * s.inner + c] += xv[(a * s.n + i) * s.inner + c];
  for (auto& v : out.data()) v *= inv;
  return x.tape().record("mean_axis", std::move(out), {x}, [x, s, inv](const Tensor<T>& g, const Tensor<T>&) {
    Tensor<T>* gx = x.tape().grad_buffer(x);
    if (!gx) return;
    for (std::int64_t a = 0; a < s.outer; ++a)
      for (std::int64_t i = 0; i < s.n; ++i)
        for (std::int64_t c = 0; c < s.inner; ++c) (*gx)[(a * s.n + i) * s.inner + c] += g[a * s.inner + c] * inv;
  });
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  return x.tape().record("reshape", std::move(out), {x}, [x](const Tensor<T>& g, const Tensor<T>&) {
    x.tape().accumulate(x, g.reshaped(x.shape()));
  });
}

namespace {

template <typename T>
Tensor<T> permute_values(const Tensor<T>& in, const std::vector<std::size_t>& perm) {
  const Shape& s = in.shape();
  const std::size_t r = s.size();
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = s[perm[i]];
  const auto in_st = contiguous_strides(s);
  std::vector<std::int64_t> st(r);
  for (std::size_t i = 0; i < r; ++i) st[i] = in_st[perm[i]];
  Tensor<T> out(out_shape);
  if (r == 0) {
    out[0] = in[0];
    return out;
  }
  const T* src = in.raw();
  T* dst = out.raw();
  std::vector<std::int64_t> idx(r, 0);
  std::int64_t off = 0;
  const std::int64_t inner = out_shape[r - 1], inner_st = st[r - 1];
  std::int64_t o = 0;
  while (true) {
    for (std::int64_t j = 0; j < inner; ++j) dst[o++] = src[off + j * inner_st];
    std::size_t d = r - 1;
    bool done = true;
    while (d-- > 0) {
      ++idx[d];
      off += st[d];
      if (idx[d] < out_shape[d]) {
        done = false;
        break;
      }
      off -= st[d] * out_shape[d];
      idx[d] = 0;
    }
    if (done) break;
  }
  return out;
}

}  // namespace

template <typename T>
Var<T> permute(const Var<T>& x, const std::vector<std::size_t>& perm) {
  const std::size_t r = x.value().ndim();
  std::vector<bool> seen(r, false);
  if (perm.size() != r) throw ShapeError("permute: permutation length does not match rank of " + shape_str(x.shape()));
  for (auto p : perm) {
    if (p >= r || seen[p]) throw ShapeError("permute: invalid permutation");
    seen[p] = true;
  }
  std::vector<std::size_t> inverse(r);
  for (std::size_t i = 0; i < r; ++i) inverse[perm[i]] = i;
  return x.tape().record("permute", permute_values(x.value(), perm), {x}, [x, inverse](const Tensor<T>& g, const Tensor<T>&) {
    x.tape().accumulate(x, permute_values(g, inverse));
  });
}

template <typename T>
Var<T> slice(const Var<T>& x, std::int64_t axis, std::int64_t start, std::int64_t length) {
  const auto ax = normalize_axis(axis, x.value().ndim());
  const AxisSplit s = split_at(x.shape(), ax);
  if (start < 0 || length < 1 || start + length > s.n) {
    throw ShapeError("slice [" + std::to_string(start) + ", " + std::to_string(start + length) + ") out of range on axis " +
                     std::to_string(ax) + " of " + shape_str(x.shape()));
  }
  Shape out_shape = x.shape();
  out_shape[ax] = length;
  Tensor<T> out(out_shape);
  const T* src = x.value().raw();
  for (std::int64_t a = 0; a < s.outer; ++a) {
    std::copy_n(src + (a * s.n + start) * s.inner, length * s.inner, out.raw() + a * length * s.inner);
  }
  return x.tape().record("slice", std::move(out), {x}, [x, s, start, length](const Tensor<T>& g, const Tensor<T>&) {
    Tensor<T>* gx = x.tape().grad_buffer(x);
    if (!gx) return;
    for (std::int64_t a = 0; a < s.outer; ++a) {
      T* d = gx->raw() + (a * s.n + start) * s.inner;
      const T* gp = g.raw() + a * length * s.inner;
      for (std::int64_t j = 0; j < length * s.inner; ++j) d[j] += gp[j];
    }
  });
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& xs, std::int64_t axis) {
  if (xs.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = xs.front().shape();
  const auto ax = normalize_axis(axis, first.size());
  Shape out_shape = first;
  out_shape[ax] = 0;
  std::vector<std::int64_t> sizes;
  for (const auto& v : xs) {
    const Shape& s = v.shape();
    if (s.size() != first.size()) throw ShapeError("concat: rank mismatch " + shape_str(s) + " vs " + shape_str(first));
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != ax && s[i] != first[i]) {
        throw ShapeError("concat: axis " + std::to_string(i) + " differs between " + shape_str(s) + " and " +
                         shape_str(first));
      }
    }
    sizes.push_back(s[ax]);
    out_shape[ax] += s[ax];
  }
  const AxisSplit so = split_at(out_shape, ax);
  Tensor<T> out(out_shape);
  std::int64_t pos = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const T* src = xs[k].value().raw();
    for (std::int64_t a = 0; a < so.outer; ++a) {
      std::copy_n(src + a * sizes[k] * so.inner, sizes[k] * so.inner, out.raw() + (a * so.n + pos) * so.inner);
    }
    pos += sizes[k];
  }
  return xs.front().tape().record("concat", std::move(out), xs, [xs, sizes, so](const Tensor<T>& g, const Tensor<T>&) {
    std::int64_t p = 0;
    for (std::size_t k = 0; k < xs.size(); ++k) {
      if (Tensor<T>* gx = xs[k].tape().grad_buffer(xs[k])) {
        for (std::int64_t a = 0; a < so.outer; ++a) {
          const T* src = g.raw() + (a * so.n + p) * so.inner;
          T* d = gx->raw() + a * sizes[k] * so.inner;
          for (std::int64_t j = 0; j < sizes[k] * so.inner; ++j) d[j] += src[j];
        }
      }
      p += sizes[k];
    }
  });
}

namespace {

struct MatmulPlan {
  Shape out;
  std::int64_t m, k, p;
  std::vector<std::int64_t> a_batch, b_batch;
};

MatmulPlan plan_matmul(const Shape& a, const Shape& b) {
  if (a.size() < 2 || b.size() < 2) {
    throw ShapeError("matmul requires rank >= 2 operands, got " + shape_str(a) + " and " + shape_str(b));
  }
  MatmulPlan mp;
  mp.m = a[a.size() - 2];
  mp.k = a.back();
  mp.p = b.back();
  if (b[b.size() - 2] != mp.k) {
    throw ShapeError("matmul: axis " + std::to_string(a.size() - 1) + " of " + shape_str(a) + " (" +
                     std::to_string(mp.k) + ") does not match axis " + std::to_string(b.size() - 2) + " of " +
                     shape_str(b) + " (" + std::to_string(b[b.size() - 2]) + ")");
  }
  Shape la(a.begin(), a.end() - 2), lb(b.begin(), b.end() - 2);
  if (la.empty()) la.push_back(1);
  if (lb.empty()) lb.push_back(1);
  Shape lead;
  try {
    lead = broadcast_shape(la, lb);
  } catch (const ShapeError& e) {
    throw ShapeError(std::string("matmul leading dims: ") + e.what());
  }
  auto plan = make_plan(la, lb);
  for_each_run(plan, [&](std::int64_t, std::int64_t ao, std::int64_t bo, std::int64_t n, std::int64_t sa,
                         std::int64_t sb) {
    for (std::int64_t j = 0; j < n; ++j) {
      mp.a_batch.push_back(ao + j * sa);
      mp.b_batch.push_back(bo + j * sb);
    }
  });
  if (a.size() == 2 && b.size() == 2) lead.clear();
  mp.out = lead;
  mp.out.push_back(mp.m);
  mp.out.push_back(mp.p);
  return mp;
}

}  // namespace

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  Tape<T>& tape = same_tape(a, b, "matmul");
  MatmulPlan mp = plan_matmul(a.shape(), b.shape());
  Tensor<T> out(mp.out);
  const std::int64_t sa = mp.m * mp.k, sb = mp.k * mp.p, so = mp.m * mp.p;
  for (std::size_t i = 0; i < mp.a_batch.size(); ++i) {
    kernels::gemm(mp.m, mp.p, mp.k, a.value().raw() + mp.a_batch[i] * sa, false, b.value().raw() + mp.b_batch[i] * sb,
                  false, out.raw() + static_cast<std::int64_t>(i) * so, false);
  }
  return tape.record("matmul", std::move(out), {a, b}, [a, b, mp, sa, sb, so](const Tensor<T>& g, const Tensor<T>&) {
    Tape<T>& t = a.tape();
    Tensor<T>* ga = t.grad_buffer(a);
    Tensor<T>* gb = t.grad_buffer(b);
    for (std::size_t i = 0; i < mp.a_batch.size(); ++i) {
      const T* gp = g.raw() + static_cast<std::int64_t>(i) * so;
      if (ga) {
        kernels::gemm(mp.m, mp.k, mp.p, gp, false, b.value().raw() + mp.b_batch[i] * sb, true,
                      ga->raw() + mp.a_batch[i] * sa, true);
      }
      if (gb) {
        kernels::gemm(mp.k, mp.p, mp.m, a.value().raw() + mp.a_batch[i] * sa, true, gp, false,
                      gb->raw() + mp.b_batch[i] * sb, true);
      }
    }
  });
}

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, std::int64_t stride, std::int64_t padding, std::int64_t groups) {
  Tape<T>& tape = same_tape(x, w, "conv2d");
  const auto geo = kernels::conv2d_geometry(x.shape(), w.shape(), stride, padding, groups);
  Tensor<T> out(Shape{geo.batch, geo.out_channels, geo.out_height(), geo.out_width()});
  kernels::conv2d_forward(geo, x.value().raw(), w.value().raw(), out.raw());
  return tape.record("conv2d", std::move(out), {x, w}, [x, w, geo](const Tensor<T>& g, const Tensor<T>&) {
    Tape<T>& t = x.tape();
    Tensor<T>* gx = t.grad_buffer(x);
    Tensor<T>* gw = t.grad_buffer(w);
    kernels::conv2d_backward(geo, x.value().raw(), w.value().raw(), g.raw(), gx ? gx->raw() : nullptr,
                             gw ? gw->raw() : nullptr);
  });
}

template <typename T>
Var<T> conv1d_temporal(const Var<T>& x, const Var<T>& w) {
  Tape<T>& tape = same_tape(x, w, "conv1d_temporal");
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (xs.size() != 3) throw ShapeError("conv1d_temporal expects input [N,C,T], got " + shape_str(xs));
  if (xs[2] < 1) throw ShapeError("conv1d_temporal: T must be >= 1");
  if (ws.size() != 2 || ws[0] != xs[1] || ws[1] % 2 == 0) {
    throw ShapeError("conv1d_temporal: kernel " + shape_str(ws) + " must be [C,k] with C=" + std::to_string(xs[1]) +
                     " and odd k");
  }
  Tensor<T> out(xs);
  kernels::conv1d_depthwise_forward(xs[0], xs[1], xs[2], ws[1], x.value().raw(), w.value().raw(), out.raw());
  return tape.record("conv1d_temporal", std::move(out), {x, w}, [x, w](const Tensor<T>& g, const Tensor<T>&) {
    Tape<T>& t = x.tape();
    Tensor<T>* gx = t.grad_buffer(x);
    Tensor<T>* gw = t.grad_buffer(w);
    const Shape& s = x.shape();
    kernels::conv1d_depthwise_backward(s[0], s[1], s[2], w.shape()[1], x.value().raw(), w.value().raw(), g.raw(),
                                       gx ? gx->raw() : nullptr, gw ? gw->raw() : nullptr);
  });
}

template <typename T>
Var<T> global_avg_pool_spatial(const Var<T>& x) {
  const Shape& s = x.shape();
  if (s.size() != 4) throw ShapeError("global_avg_pool_spatial expects [N,C,H,W], got " + shape_str(s));
  const std::int64_t planes = s[0] * s[1], hw = s[2] * s[3];
  Tensor<T> out(Shape{s[0], s[1], 1, 1});
  const T* xv = x.value().raw();
  const T inv = T(1) / static_cast<T>(hw);
  for (std::int64_t p = 0; p < planes; ++p) {
    T acc = 0;
    for (std::int64_t i = 0; i < hw; ++i) acc += xv[p * hw + i];
    out[p] = acc * inv;
  }
  return x.tape().record("global_avg_pool_spatial", std::move(out), {x}, [x, planes, hw, inv](const Tensor<T>& g, const Tensor<T>&) {
    Tensor<T>* gx = x.tape().grad_buffer(x);
    if (!gx) return;
    for (std::int64_t p = 0; p < planes; ++p) {
      const T v = g[p] * inv;
      T* d = gx->raw() + p * hw;
      for (std::int64_t i = 0; i < hw; ++i) d[i] += v;
    }
  });
}

template <typename T>
Var<T> fully_connected(const Var<T>& x, const Var<T>& w, const Var<T>& bias) {
  Tape<T>& tape = same_tape(x, w, "fully_connected");
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (xs.empty() || ws.size() != 2 || ws[1] != xs.back()) {
    throw ShapeError("fully_connected: weights " + shape_str(ws) + " do not match input " + shape_str(xs) +
                     " (expected [Dout," + (xs.empty() ? std::string("?") : std::to_string(xs.back())) + "])");
  }
  const std::int64_t din = ws[1], dout = ws[0];
  const std::int64_t rows = static_cast<std::int64_t>(x.value().numel()) / din;
  if (bias.valid() && (bias.shape().size() != 1 || bias.shape()[0] != dout)) {
    throw ShapeError("fully_connected: bias " + shape_str(bias.shape()) + " does not match Dout=" + std::to_string(dout));
  }
  Shape out_shape = xs;
  out_shape.back() = dout;
  Tensor<T> out(out_shape);
  kernels::gemm(rows, dout, din, x.value().raw(), false, w.value().raw(), true, out.raw(), false);
  if (bias.valid()) {
    const T* bv = bias.value().raw();
    for (std::int64_t r = 0; r < rows; ++r)
      for (std::int64_t j = 0; j < dout; ++j) out[r * dout + j] += bv[j];
  }
  std::vector<Var<T>> inputs{x, w};
  if (bias.valid()) inputs.push_back(bias);
  return tape.record("fully_connected", std::move(out), inputs, [x, w, bias, rows, din, dout](const Tensor<T>& g, const Tensor<T>&) {
    Tape<T>& t = x.tape();
    if (Tensor<T>* gx = t.grad_buffer(x)) kernels::gemm(rows, din, dout, g.raw(), false, w.value().raw(), false, gx->raw(), true);
    if (Tensor<T>* gw = t.grad_buffer(w)) kernels::gemm(dout, din, rows, g.raw(), true, x.value().raw(), false, gw->raw(), true);
    if (bias.valid()) {
      if (Tensor<T>* gb = t.grad_buffer(bias)) {
        for (std::int64_t r = 0; r < rows; ++r)
          for (std::int64_t j = 0; j < dout; ++j) (*gb)[j] += g[r * dout + j];
      }
    }
  });
}

template <typename T>
Var<T> max_pool2d(const Var<T>& x, std::int64_t kernel, std::int64_t stride, std::int64_t padding) {
  const Shape& s = x.shape();
  if (s.size() != 4) throw ShapeError("max_pool2d expects [N,C,H,W], got " + shape_str(s));
  if (kernel < 1 || stride < 1 || padding < 0 || padding >= kernel) throw ConfigError("max_pool2d: invalid geometry");
  const std::int64_t ho = (s[2] + 2 * padding - kernel) / stride + 1;
  const std::int64_t wo = (s[3] + 2 * padding - kernel) / stride + 1;
  if (ho < 1 || wo < 1) throw ShapeError("max_pool2d: window larger than input " + shape_str(s));
  Tensor<T> out(Shape{s[0], s[1], ho, wo});
  std::vector<std::int64_t> arg(out.numel());
  const T* xv = x.value().raw();
  for (std::int64_t p = 0; p < s[0] * s[1]; ++p) {
    for (std::int64_t oy = 0; oy < ho; ++oy) {
      for (std::int64_t ox = 0; ox < wo; ++ox) {
        T best = -std::numeric_limits<T>::infinity();
        std::int64_t bi = -1;
        for (std::int64_t ky = 0; ky < kernel; ++ky) {
          const std::int64_t iy = oy * stride - padding + ky;
          if (iy < 0 || iy >= s[2]) continue;
          for (std::int64_t kx = 0; kx < kernel; ++kx) {
            const std::int64_t ix = ox * stride - padding + kx;
            if (ix < 0 || ix >= s[3]) continue;
            const std::int64_t idx = p * s[2] * s[3] + iy * s[3] + ix;
            if (bi < 0 || xv[idx] > best) {
              best = xv[idx];
              bi = idx;
            }
          }
        }
        const std::int64_t o = (p * ho + oy) * wo + ox;
        out[o] = best;
        arg[o] = bi;
      }
    }
  }
  return x.tape().record("max_pool2d", std::move(out), {x}, [x, arg = std::move(arg)](const Tensor<T>& g, const Tensor<T>&) {
    Tensor<T>* gx = x.tape().grad_buffer(x);
    if (!gx) return;
    for (std::size_t o = 0; o < arg.size(); ++o) (*gx)[arg[o]] += g[o];
  });
}

template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, BatchNormStats<T>& stats, NormMode mode) {
  Tape<T>& tape = same_tape(x, gamma, "batch_norm");
  const Shape& s = x.shape();
  if (s.size() < 2) throw ShapeError("batch_norm expects [N,C,...], got " + shape_str(s));
  const std::int64_t n = s[0], c = s[1];
  std::int64_t inner = 1;
  for (std::size_t i = 2; i < s.size(); ++i) inner *= s[i];
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) throw ShapeError("batch_norm: affine parameters must be [C]");
  if (stats.running_mean.shape() != Shape{c}) stats = BatchNormStats<T>(c);
  if (!(stats.eps > T(0))) throw ConfigError("batch_norm: eps must be positive");
  const std::int64_t count = n * inner;
  const bool train = mode == NormMode::kTrain;
  if (train && count == 1) {
    throw ShapeError("batch_norm: degenerate statistics, N*H*W = 1 in train mode for input " + shape_str(s));
  }
  const T* xv = x.value().raw();
  std::vector<T> mean_c(c), inv_std(c);
  for (std::int64_t ch = 0; ch < c; ++ch) {
    T m, var;
    if (train) {
      T acc = 0;
      for (std::int64_t b = 0; b < n; ++b)
        for (std::int64_t i = 0; i < inner; ++i) acc += xv[(b * c + ch) * inner + i];
      m = acc / static_cast<T>(count);
      T sq = 0;
      for (std::int64_t b = 0; b < n; ++b)
        for (std::int64_t i = 0; i < inner; ++i) {
          const T d = xv[(b * c + ch) * inner + i] - m;
          sq += d * d;
        }
      var = sq / static_cast<T>(count);
      const T unbiased = sq / static_cast<T>(count - 1);
      stats.running_mean[ch] = (T(1) - stats.momentum) * stats.running_mean[ch] + stats.momentum * m;
      stats.running_var[ch] = (T(1) - stats.momentum) * stats.running_var[ch] + stats.momentum * unbiased;
    } else {
      m = stats.running_mean[ch];
      var = stats.running_var[ch];
    }
    mean_c[ch] = m;
    inv_std[ch] = T(1) / std::sqrt(var + stats.eps);
  }
  Tensor<T> xhat(s);
  Tensor<T> out(s);
  const T* gv = gamma.value().raw();
  const T* bv = beta.value().raw();
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t i = 0; i < inner; ++i) {
        const std::int64_t k = (b * c + ch) * inner + i;
        xhat[k] = (xv[k] - mean_c[ch]) * inv_std[ch];
        out[k] = gv[ch] * xhat[k] + bv[ch];
      }
  return tape.record("batch_norm", std::move(out), {x, gamma, beta},
                     [x, gamma, beta, n, c, inner, count, train, xhat = std::move(xhat),
                      inv_std = std::move(inv_std)](const Tensor<T>& g, const Tensor<T>&) {
                       Tape<T>& t = x.tape();
                       std::vector<T> sum_g(c, T(0)), sum_gx(c, T(0));
                       for (std::int64_t b = 0; b < n; ++b)
                         for (std::int64_t ch = 0; ch < c; ++ch)
                           for (std::int64_t i = 0; i < inner; ++i) {
                             const std::int64_t k = (b * c + ch) * inner + i;
                             sum_g[ch] += g[k];
                             sum_gx[ch] += g[k] * xhat[k];
                           }
                       if (Tensor<T>* gg = t.grad_buffer(gamma))
                         for (std::int64_t ch = 0; ch < c; ++ch) (*gg)[ch] += sum_gx[ch];
                       if (Tensor<T>* gb = t.grad_buffer(beta))
                         for (std::int64_t ch = 0; ch < c; ++ch) (*gb)[ch] += sum_g[ch];
                       Tensor<T>* gx = t.grad_buffer(x);
                       if (!gx) return;
                       const T* gam = gamma.value().raw();
                       const T inv_count = T(1) / static_cast<T>(count);
                       for (std::int64_t b = 0; b < n; ++b)
                         for (std::int64_t ch = 0; ch < c; ++ch) {
                           const T scale_c = gam[ch] * inv_std[ch];
                           for (std::int64_t i = 0; i < inner; ++i) {
                             const std::int64_t k = (b * c + ch) * inner + i;
                             if (train) {
                               (*gx)[k] += scale_c * (g[k] - inv_count * sum_g[ch] - xhat[k] * inv_count * sum_gx[ch]);
                             } else {
                               (*gx)[k] += scale_c * g[k];
                             }
                           }
                         }
                     });
}

template <typename T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const int> labels) {
  const Shape& s = logits.shape();
  if (s.size() != 2) throw ShapeError("cross_entropy expects logits [N,K], got " + shape_str(s));
  const std::int64_t n = s[0], k = s[1];
  if (static_cast<std::int64_t>(labels.size()) != n) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " + std::to_string(n));
  }
  Tensor<T> probs(s);
  const T* lv = logits.value().raw();
  T loss = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= k) throw ShapeError("cross_entropy: label " + std::to_string(y) + " outside [0," + std::to_string(k) + ")");
    T mx = lv[i * k];
    for (std::int64_t j = 1; j < k; ++j) mx = std::max(mx, lv[i * k + j]);
    T total = 0;
    for (std::int64_t j = 0; j < k; ++j) {
      probs[i * k + j] = std::exp(lv[i * k + j] - mx);
      total += probs[i * k + j];
    }
    for (std::int64_t j = 0; j < k; ++j) probs[i * k + j] /= total;
    loss += std::log(total) + mx - lv[i * k + y];
  }
  loss /= static_cast<T>(n);
  std::vector<int> lab(labels.begin(), labels.end());
  return logits.tape().record("cross_entropy", Tensor<T>::scalar(loss), {logits},
                              [logits, n, k, probs = std::move(probs), lab = std::move(lab)](const Tensor<T>& g, const Tensor<T>&) {
                                Tensor<T>* gl = logits.tape().grad_buffer(logits);
                                if (!gl) return;
                                const T scale_g = g.item() / static_cast<T>(n);
                                for (std::int64_t i = 0; i < n; ++i)
                                  for (std::int64_t j = 0; j < k; ++j) {
                                    const T target = j == lab[static_cast<std::size_t>(i)] ? T(1) : T(0);
                                    (*gl)[i * k + j] += scale_g * (probs[i * k + j] - target);
                                  }
                              });
}

#define TSI_INSTANTIATE_OPS(T)                                                                              \
  template Var<T> add<T>(const Var<T>&, const Var<T>&);                                                    \
  template Var<T> sub<T>(const Var<T>&, const Var<T>&);                                                    \
  template Var<T> mul<T>(const Var<T>&, const Var<T>&);                                                    \
  template Var<T> scale<T>(const Var<T>&, T);                                                              \
  template Var<T> relu<T>(const Var<T>&);                                                                  \
  template Var<T> sigmoid<T>(const Var<T>&);                                                               \
  template Var<T> softmax<T>(const Var<T>&, std::int64_t);                                                 \
  template Var<T> sum<T>(const Var<T>&);                                                                   \
  template Var<T> mean<T>(const Var<T>&);                                                                  \
  template Var<T> mean_axis<T>(const Var<T>&, std::int64_t);                                               \
  template Var<T> reshape<T>(const Var<T>&, Shape);                                                        \
  template Var<T> permute<T>(const Var<T>&, const std::vector<std::size_t>&);                              \
  template Var<T> slice<T>(const Var<T>&, std::int64_t, std::int64_t, std::int64_t);                      \
  template Var<T> concat<T>(const std::vector<Var<T>>&, std::int64_t);                                     \
  template Var<T> matmul<T>(const Var<T>&, const Var<T>&);                                                 \
  template Var<T> conv2d<T>(const Var<T>&, const Var<T>&, std::int64_t, std::int64_t, std::int64_t);       \
  template Var<T> conv1d_temporal<T>(const Var<T>&, const Var<T>&);                                        \
  template Var<T> global_avg_pool_spatial<T>(const Var<T>&);                                               \
  template Var<T> fully_connected<T>(const Var<T>&, const Var<T>&, const Var<T>&);                         \
  template Var<T> max_pool2d<T>(const Var<T>&, std::int64_t, std::int64_t, std::int64_t);                  \
  template Var<T> batch_norm<T>(const Var<T>&, const Var<T>&, const Var<T>&, BatchNormStats<T>&, NormMode); \
  template Var<T> cross_entropy<T>(const Var<T>&, std::span<const int>);

TSI_INSTANTIATE_OPS(float)
TSI_INSTANTIATE_OPS(double)

}  // namespace tsi::ops
