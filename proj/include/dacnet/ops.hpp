#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

#include "dacnet/error.hpp"
#include "dacnet/graph.hpp"
#include "dacnet/tensor.hpp"

// Differentiable operations on Graph<T>. Image tensors are [batch, height, width,
// channels]; convolution kernels are [L, L, out_channels, in_channels].

namespace dacnet::ops {

enum class Padding { same, valid };

namespace detail {

inline void expect_rank(const Shape& s, std::size_t r, const char* what) {
  if (s.size() != r)
    throw DimensionError(std::string(what) + ": expected rank " + std::to_string(r) + ", got " + shape_str(s));
}

template <class T>
void accumulate(BasicTensor<T>& dst, const BasicTensor<T>& src) {
  T* d = dst.data().data();
  const T* s = src.data().data();
  for (std::size_t i = 0, n = dst.size(); i < n; ++i) d[i] += s[i];
}

}  // namespace detail

template <class T>
NodeId relu(Graph<T>& g, NodeId x) {
  const auto& xv = g.value(x);
  BasicTensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] > T(0) ? xv[i] : T(0);
  return g.record("relu", {x}, std::move(out), [x](Graph<T>& g, NodeId self) {
    const auto& gy = g.grad_buffer(self);
    const auto& xv = g.value(x);
    auto& gx = g.grad_buffer(x);
    for (std::size_t i = 0; i < xv.size(); ++i)
      if (xv[i] > T(0)) gx[i] += gy[i];
  });
}

template <class T>
NodeId add(Graph<T>& g, NodeId a, NodeId b) {
  const auto& av = g.value(a);
  const auto& bv = g.value(b);
  if (av.shape() != bv.shape()) throw_dims("add", av.shape(), bv.shape());
  BasicTensor<T> out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  g.count(out.size());
  return g.record("add", {a, b}, std::move(out), [a, b](Graph<T>& g, NodeId self) {
    const auto& gy = g.grad_buffer(self);
    if (g.requires_grad(a)) detail::accumulate(g.grad_buffer(a), gy);
    if (g.requires_grad(b)) detail::accumulate(g.grad_buffer(b), gy);
  });
}

template <class T>
NodeId sub(Graph<T>& g, NodeId a, NodeId b) {
  const auto& av = g.value(a);
  const auto& bv = g.value(b);
  if (av.shape() != bv.shape()) throw_dims("sub", av.shape(), bv.shape());
  BasicTensor<T> out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  g.count(out.size());
  return g.record("sub", {a, b}, std::move(out), [a, b](Graph<T>& g, NodeId self) {
    const auto& gy = g.grad_buffer(self);
    if (g.requires_grad(a)) detail::accumulate(g.grad_buffer(a), gy);
    if (g.requires_grad(b)) {
      auto& gb = g.grad_buffer(b);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= gy[i];
    }
  });
}

/// Elementwise product.
template <class T>
NodeId mul(Graph<T>& g, NodeId a, NodeId b) {
  const auto& av = g.value(a);
  const auto& bv = g.value(b);
  if (av.shape() != bv.shape()) throw_dims("mul", av.shape(), bv.shape());
  BasicTensor<T> out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  g.count(out.size());
  return g.record("mul", {a, b}, std::move(out), [a, b](Graph<T>& g, NodeId self) {
    const auto& gy = g.grad_buffer(self);
    const auto& av = g.value(a);
    const auto& bv = g.value(b);
    if (g.requires_grad(a)) {
      auto& ga = g.grad_buffer(a);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i] * bv[i];
    }
    if (g.requires_grad(b)) {
      auto& gb = g.grad_buffer(b);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += gy[i] * av[i];
    }
  });
}

template <class T>
NodeId scale(Graph<T>& g, NodeId x, T c) {
  BasicTensor<T> out = g.value(x);
  for (auto& v : out.storage()) v *= c;
  g.count(out.size());
  return g.record("scale", {x}, std::move(out), [x, c](Graph<T>& g, NodeId self) {
    const auto& gy = g.grad_buffer(self);
    auto& gx = g.grad_buffer(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += c * gy[i];
  });
}

template <class T>
NodeId sum(Graph<T>& g, NodeId x) {
  const auto& xv = g.value(x);
  T s = 0;
  for (T v : xv.data()) s += v;
  g.count(xv.size());
  return g.record("sum", {x}, BasicTensor<T>::scalar(s), [x](Graph<T>& g, NodeId self) {
    const T gy = g.grad_buffer(self)[0];
    auto& gx = g.grad_buffer(x);
    for (auto& v : gx.storage()) v += gy;
  });
}

template <class T>
NodeId mean(Graph<T>& g, NodeId x) {
  const std::size_t n = g.value(x).size();
  if (n == 0) throw DimensionError("mean of empty tensor");
  return scale(g, sum(g, x), T(1) / static_cast<T>(n));
}

template <class T>
NodeId reshape(Graph<T>& g, NodeId x, Shape s) {
  BasicTensor<T> out = g.value(x).reshaped(std::move(s));
  return g.record("reshape", {x}, std::move(out), [x](Graph<T>& g, NodeId self) {
    const auto& gy = g.grad_buffer(self);
    auto& gx = g.grad_buffer(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i];
  });
}

/// Plain matrix product [m,k] x [k,n].
template <class T>
NodeId matmul(Graph<T>& g, NodeId a, NodeId b) {
  const auto& av = g.value(a);
  const auto& bv = g.value(b);
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) throw_dims("matmul", av.shape(), bv.shape());
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  BasicTensor<T> out({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = av[i * k + p];
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += aip * bv[p * n + j];
    }
  g.count(2 * m * k * n);
  return g.record("matmul", {a, b}, std::move(out), [a, b, m, k, n](Graph<T>& g, NodeId self) {
    const auto& gy = g.grad_buffer(self);
    const auto& av = g.value(a);
    const auto& bv = g.value(b);
    if (g.requires_grad(a)) {
      auto& ga = g.grad_buffer(a);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          T s = 0;
          for (std::size_t j = 0; j < n; ++j) s += gy[i * n + j] * bv[p * n + j];
          ga[i * k + p] += s;
        }
    }
    if (g.requires_grad(b)) {
      auto& gb = g.grad_buffer(b);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const T aip = av[i * k + p];
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * gy[i * n + j];
        }
    }
  });
}

/// y [batch, m] with weights [n, m] and optional bias [n]: y W^T + b.
template <class T>
NodeId linear(Graph<T>& g, NodeId y, NodeId w, std::optional<NodeId> bias) {
  const auto& yv = g.value(y);
  const auto& wv = g.value(w);
  if (yv.rank() != 2 || wv.rank() != 2 || yv.dim(1) != wv.dim(1)) throw_dims("linear", yv.shape(), wv.shape());
  const std::size_t B = yv.dim(0), m = yv.dim(1), n = wv.dim(0);
  if (bias && g.value(*bias).shape() != Shape{n}) throw_dims("linear bias", g.value(*bias).shape(), {n});
  BasicTensor<T> out({B, n});
  for (std::size_t r = 0; r < B; ++r)
    for (std::size_t i = 0; i < n; ++i) {
      T acc = 0;
      const T* wr = &wv[i * m];
      const T* yr = &yv[r * m];
      for (std::size_t j = 0; j < m; ++j) acc += wr[j] * yr[j];
      if (bias) acc += g.value(*bias)[i];
      out[r * n + i] = acc;
    }
  g.count(B * (2 * m * n + (bias ? n : 0)));
  std::vector<NodeId> ins{y, w};
  if (bias) ins.push_back(*bias);
  return g.record("linear", ins, std::move(out), [y, w, bias, B, m, n](Graph<T>& g, NodeId self) {
    const auto& gy = g.grad_buffer(self);
    const auto& yv = g.value(y);
    const auto& wv = g.value(w);
    if (g.requires_grad(w)) {
      auto& gw = g.grad_buffer(w);
      for (std::size_t r = 0; r < B; ++r)
        for (std::size_t i = 0; i < n; ++i) {
          const T gi = gy[r * n + i];
          for (std::size_t j = 0; j < m; ++j) gw[i * m + j] += gi * yv[r * m + j];
        }
    }
    if (bias && g.requires_grad(*bias)) {
      auto& gb = g.grad_buffer(*bias);
      for (std::size_t r = 0; r < B; ++r)
        for (std::size_t i = 0; i < n; ++i) gb[i] += gy[r * n + i];
    }
    if (g.requires_grad(y)) {
      auto& gx = g.grad_buffer(y);
      for (std::size_t r = 0; r < B; ++r)
        for (std::size_t i = 0; i < n; ++i) {
          const T gi = gy[r * n + i];
          for (std::size_t j = 0; j < m; ++j) gx[r * m + j] += gi * wv[i * m + j];
        }
    }
  });
}

/// Per-edge preactivated aggregation: out[r,i] = sum_j w[i,j] * relu(bd[i,j] + y[r,j]).
template <class T>
NodeId dense_dac(Graph<T>& g, NodeId y, NodeId w, NodeId bd) {
  const auto& yv = g.value(y);
  const auto& wv = g.value(w);
  const auto& bv = g.value(bd);
  if (yv.rank() != 2 || wv.rank() != 2 || yv.dim(1) != wv.dim(1)) throw_dims("dense_dac", yv.shape(), wv.shape());
  if (bv.shape() != wv.shape()) throw_dims("dense_dac biases", bv.shape(), wv.shape());
  const std::size_t B = yv.dim(0), m = yv.dim(1), n = wv.dim(0);
  BasicTensor<T> out({B, n});
  for (std::size_t r = 0; r < B; ++r)
    for (std::size_t i = 0; i < n; ++i) {
      T acc = 0;
      const T* wr = &wv[i * m];
      const T* br = &bv[i * m];
      const T* yr = &yv[r * m];
      for (std::size_t j = 0; j < m; ++j) {
        const T pre = br[j] + yr[j];
        acc += wr[j] * (pre > T(0) ? pre : T(0));
      }
      out[r * n + i] = acc;
    }
  g.count(B * 3 * m * n);
  return g.record("dense_dac", {y, w, bd}, std::move(out), [y, w, bd, B, m, n](Graph<T>& g, NodeId self) {
    const auto& gy = g.grad_buffer(self);
    const auto& yv = g.value(y);
    const auto& wv = g.value(w);
    const auto& bv = g.value(bd);
    const bool need_w = g.requires_grad(w), need_b = g.requires_grad(bd), need_y = g.requires_grad(y);
    T* gw = need_w ? g.grad_buffer(w).data().data() : nullptr;
    T* gb = need_b ? g.grad_buffer(bd).data().data() : nullptr;
    T* gx = need_y ? g.grad_buffer(y).data().data() : nullptr;
    for (std::size_t r = 0; r < B; ++r)
      for (std::size_t i = 0; i < n; ++i) {
        const T gi = gy[r * n + i];
        for (std::size_t j = 0; j < m; ++j) {
          const T pre = bv[i * m + j] + yv[r * m + j];
          if (!(pre > T(0))) continue;
          if (gw) gw[i * m + j] += gi * pre;
          const T gp = gi * wv[i * m + j];
          if (gb) gb[i * m + j] += gp;
          if (gx) gx[r * m + j] += gp;
        }
      }
  });
}

/// Edge lists for a sparse preactivated layer. Edges of unit u occupy
/// [unit_ptr[u], unit_ptr[u+1]); src[e] is the input column of edge e.
struct SparseIndex {
  std::vector<std::size_t> unit_ptr;
  std::vector<std::size_t> src;
  std::size_t inputs = 0;

  std::size_t units() const { return unit_ptr.empty() ? 0 : unit_ptr.size() - 1; }
  std::size_t edges() const { return src.size(); }

  void validate() const {
    if (unit_ptr.empty() || unit_ptr.front() != 0 || unit_ptr.back() != src.size())
      throw DimensionError("sparse layer: malformed unit offsets");
    for (std::size_t u = 0; u + 1 < unit_ptr.size(); ++u)
      if (unit_ptr[u] > unit_ptr[u + 1]) throw DimensionError("sparse layer: offsets must be non-decreasing");
    for (std::size_t s : src)
      if (s >= inputs) throw DimensionError("sparse layer: edge source out of range");
  }
};

/// out[r,u] = sum over edges e of u: w[e] * relu(bd[e] + y[r, src[e]]).
template <class T>
NodeId sparse_dac(Graph<T>& g, NodeId y, NodeId w, NodeId bd, const SparseIndex& idx) {
  idx.validate();
  const auto& yv = g.value(y);
  const auto& wv = g.value(w);
  const auto& bv = g.value(bd);
  if (yv.rank() != 2 || yv.dim(1) != idx.inputs) throw_dims("sparse_dac input", yv.shape(), {0, idx.inputs});
  if (wv.shape() != Shape{idx.edges()} || bv.shape() != Shape{idx.edges()})
    throw_dims("sparse_dac params", wv.shape(), {idx.edges()});
  const std::size_t B = yv.dim(0), m = idx.inputs, n = idx.units();
  BasicTensor<T> out({B, n});
  for (std::size_t r = 0; r < B; ++r)
    for (std::size_t u = 0; u < n; ++u) {
      T acc = 0;
      for (std::size_t e = idx.unit_ptr[u]; e < idx.unit_ptr[u + 1]; ++e) {
        const T pre = bv[e] + yv[r * m + idx.src[e]];
        acc += wv[e] * (pre > T(0) ? pre : T(0));
      }
      out[r * n + u] = acc;
    }
  g.count(B * 3 * idx.edges());
  return g.record("sparse_dac", {y, w, bd}, std::move(out), [y, w, bd, idx, B, m, n](Graph<T>& g, NodeId self) {
    const auto& gy = g.grad_buffer(self);
    const auto& yv = g.value(y);
    const auto& wv = g.value(w);
    const auto& bv = g.value(bd);
    T* gw = g.requires_grad(w) ? g.grad_buffer(w).data().data() : nullptr;
    T* gb = g.requires_grad(bd) ? g.grad_buffer(bd).data().data() : nullptr;
    T* gx = g.requires_grad(y) ? g.grad_buffer(y).data().data() : nullptr;
    for (std::size_t r = 0; r < B; ++r)
      for (std::size_t u = 0; u < n; ++u) {
        const T gu = gy[r * n + u];
        for (std::size_t e = idx.unit_ptr[u]; e < idx.unit_ptr[u + 1]; ++e) {
          const T pre = bv[e] + yv[r * m + idx.src[e]];
          if (!(pre > T(0))) continue;
          if (gw) gw[e] += gu * pre;
          const T gp = gu * wv[e];
          if (gb) gb[e] += gp;
          if (gx) gx[r * m + idx.src[e]] += gp;
        }
      }
  });
}

/// Adds b[c] along the last axis.
template <class T>
NodeId add_channel_bias(Graph<T>& g, NodeId x, NodeId b) {
  const auto& xv = g.value(x);
  const auto& bv = g.value(b);
  if (xv.rank() == 0 || bv.rank() != 1 || bv.dim(0) != xv.shape().back())
    throw_dims("channel bias", xv.shape(), bv.shape());
  const std::size_t c = bv.dim(0);
  BasicTensor<T> out = xv;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i % c];
  g.count(out.size());
  return g.record("bias", {x, b}, std::move(out), [x, b, c](Graph<T>& g, NodeId self) {
    const auto& gy = g.grad_buffer(self);
    if (g.requires_grad(x)) detail::accumulate(g.grad_buffer(x), gy);
    if (g.requires_grad(b)) {
      auto& gb = g.grad_buffer(b);
      for (std::size_t i = 0; i < gy.size(); ++i) gb[i % c] += gy[i];
    }
  });
}

struct ConvGeometry {
  std::size_t batch, h, w, m, n, L, stride, pad, ho, wo;
  std::size_t hp() const { return h + 2 * pad; }
  std::size_t wp() const { return w + 2 * pad; }
};

inline ConvGeometry conv_geometry(const Shape& x, const Shape& k, std::size_t stride, Padding padding) {
  detail::expect_rank(x, 4, "conv input");
  detail::expect_rank(k, 4, "conv kernel");
  if (k[0] != k[1]) throw DimensionError("conv kernel must be square: " + shape_str(k));
  if (k[0] % 2 == 0) throw DimensionError("conv kernel size must be odd: " + shape_str(k));
  if (k[3] != x[3]) throw_dims("conv channels (input vs kernel)", x, k);
  if (stride < 1) throw ContractError("conv stride must be >= 1");
  ConvGeometry geo{x[0], x[1], x[2], x[3], k[2], k[0], stride, padding == Padding::same ? (k[0] - 1) / 2 : 0, 0, 0};
  if (geo.L > geo.hp() || geo.L > geo.wp()) throw_dims("conv kernel larger than padded input", x, k);
  geo.ho = (geo.hp() - geo.L) / stride + 1;
  geo.wo = (geo.wp() - geo.L) / stride + 1;
  return geo;
}

namespace detail {

/// Multiply-add; fused in 32-bit mode for speed, separately rounded in 64-bit
/// mode so results match plain reference loops bit for bit.
template <class T>
inline T madd(T a, T b, T c) {
  if constexpr (std::is_same_v<T, float>)
    return std::fma(a, b, c);
  else
    return a * b + c;
}

/// Kernel [L,L,n,m] rearranged to [L,L,m,n] so output channels are contiguous.
template <class T>
std::vector<T> kernel_tap_major(const BasicTensor<T>& k, const ConvGeometry& geo) {
  const std::size_t L = geo.L, n = geo.n, m = geo.m;
  std::vector<T> out(L * L * m * n);
  for (std::size_t t = 0; t < L * L; ++t)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) out[(t * m + j) * n + i] = k[(t * n + i) * m + j];
  return out;
}

template <class T>
void kernel_tap_major_back(const std::vector<T>& src, BasicTensor<T>& gk, const ConvGeometry& geo) {
  const std::size_t L = geo.L, n = geo.n, m = geo.m;
  for (std::size_t t = 0; t < L * L; ++t)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) gk[(t * n + i) * m + j] += src[(t * m + j) * n + i];
}

/// Runs body(i0, width) over output-channel blocks; full blocks get a
/// compile-time width so the accumulators stay in registers.
template <class F>
inline void channel_blocks(std::size_t n, F&& body) {
  constexpr std::size_t NB = 16;
  std::size_t i0 = 0;
  for (; i0 + NB <= n; i0 += NB) body(i0, std::integral_constant<std::size_t, NB>{});
  if (i0 < n) body(i0, n - i0);
}

/// Fills the padded activation cache relu(bd[i,j] + x) for one sample, laid out
/// [hp, wp, m, n]. Padding cells hold relu(bd[i,j]).
template <class T>
void dac_activation_cache(const T* x, const std::vector<T>& bdT, const ConvGeometry& geo, std::vector<T>& act) {
  const std::size_t m = geo.m, n = geo.n, mn = m * n;
  const std::size_t hp = geo.hp(), wp = geo.wp(), p = geo.pad;
  act.resize(hp * wp * mn);
  for (std::size_t r = 0; r < hp; ++r)
    for (std::size_t c = 0; c < wp; ++c) {
      T* a = &act[(r * wp + c) * mn];
      const bool inside = r >= p && r < p + geo.h && c >= p && c < p + geo.w;
      if (inside) {
        const T* xr = x + ((r - p) * geo.w + (c - p)) * m;
        for (std::size_t j = 0; j < m; ++j) {
          const T xv = xr[j];
          const T* b = &bdT[j * n];
          T* aj = a + j * n;
          for (std::size_t i = 0; i < n; ++i) {
            const T v = b[i] + xv;
            aj[i] = v > T(0) ? v : T(0);
          }
        }
      } else {
        for (std::size_t t = 0; t < mn; ++t) a[t] = bdT[t] > T(0) ? bdT[t] : T(0);
      }
    }
}

/// Pairwise sum of a short lane array; avoids a serial dependency chain.
template <class T, class W>
inline T lane_sum(T* v, W width) {
  std::size_t nb = width;
  if (nb == 16) {
    for (std::size_t h = 8; h >= 1; h /= 2)
      for (std::size_t i = 0; i < h; ++i) v[i] += v[i + h];
    return v[0];
  }
  T s = 0;
  for (std::size_t i = 0; i < nb; ++i) s += v[i];
  return s;
}

/// Output position reached from padded cell coordinate q through tap offset a,
/// or npos when q - a is not a stride multiple inside the output.
inline std::size_t source_pos(std::size_t q, std::size_t a, std::size_t stride, std::size_t out) {
  if (q < a) return static_cast<std::size_t>(-1);
  const std::size_t d = q - a;
  if (d % stride) return static_cast<std::size_t>(-1);
  const std::size_t o = d / stride;
  return o < out ? o : static_cast<std::size_t>(-1);
}

}  // namespace detail

/// Cross-correlation with zero padding; padded taps are multiplied like interior ones.
template <class T>
NodeId conv2d(Graph<T>& g, NodeId x, NodeId k, std::size_t stride, Padding padding) {
  const auto& xv = g.value(x);
  const auto& kv = g.value(k);
  const ConvGeometry geo = conv_geometry(xv.shape(), kv.shape(), stride, padding);
  const std::size_t m = geo.m, n = geo.n, L = geo.L;
  const std::vector<T> wT = detail::kernel_tap_major(kv, geo);
  const std::vector<T> zeros(m, T(0));
  BasicTensor<T> out({geo.batch, geo.ho, geo.wo, n});
  const auto H = static_cast<std::ptrdiff_t>(geo.h), W = static_cast<std::ptrdiff_t>(geo.w);
  const auto P = static_cast<std::ptrdiff_t>(geo.pad);
  for (std::size_t b = 0; b < geo.batch; ++b)
    for (std::size_t oh = 0; oh < geo.ho; ++oh)
      for (std::size_t ow = 0; ow < geo.wo; ++ow) {
        T* o = &out[((b * geo.ho + oh) * geo.wo + ow) * n];
        detail::channel_blocks(n, [&](std::size_t i0, auto width) {
          const std::size_t nb = width;
          T acc[16] = {};
          for (std::size_t a = 0; a < L; ++a) {
            const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * stride + a) - P;
            for (std::size_t c = 0; c < L; ++c) {
              const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * stride + c) - P;
              const bool inside = ih >= 0 && iw >= 0 && ih < H && iw < W;
              const T* xr = inside ? &xv[((b * geo.h + ih) * geo.w + iw) * m] : zeros.data();
              const T* wk = &wT[(a * L + c) * m * n + i0];
              for (std::size_t j = 0; j < m; ++j) {
                const T xj = xr[j];
                const T* wr = wk + j * n;
                for (std::size_t i = 0; i < nb; ++i) acc[i] = detail::madd(xj, wr[i], acc[i]);
              }
            }
          }
          for (std::size_t i = 0; i < nb; ++i) o[i0 + i] = acc[i];
        });
      }
  g.count(static_cast<std::uint64_t>(2 * L * L * m) * n * geo.ho * geo.wo * geo.batch);
  return g.record("conv2d", {x, k}, std::move(out), [x, k, geo](Graph<T>& g, NodeId self) {
    const auto& gy = g.grad_buffer(self);
    const auto& xv = g.value(x);
    const auto& kv = g.value(k);
    const std::size_t m = geo.m, n = geo.n, L = geo.L, hp = geo.hp(), wp = geo.wp(), p = geo.pad;
    const std::vector<T> wT = detail::kernel_tap_major(kv, geo);
    if (g.requires_grad(k)) {
      std::vector<T> gwT(wT.size(), T(0));
      for (std::size_t a = 0; a < L; ++a)
        for (std::size_t c = 0; c < L; ++c)
          for (std::size_t j = 0; j < m; ++j)
            detail::channel_blocks(n, [&](std::size_t i0, auto width) {
              const std::size_t nb = width;
              T acc[16] = {};
              for (std::size_t b = 0; b < geo.batch; ++b)
                for (std::size_t oh = 0; oh < geo.ho; ++oh) {
                  const std::size_t r = oh * geo.stride + a;
                  if (r < p || r >= p + geo.h) continue;
                  for (std::size_t ow = 0; ow < geo.wo; ++ow) {
                    const std::size_t cc = ow * geo.stride + c;
                    if (cc < p || cc >= p + geo.w) continue;
                    const T xj = xv[((b * geo.h + (r - p)) * geo.w + (cc - p)) * m + j];
                    const T* go = &gy[((b * geo.ho + oh) * geo.wo + ow) * n + i0];
                    for (std::size_t i = 0; i < nb; ++i) acc[i] = detail::madd(xj, go[i], acc[i]);
                  }
                }
              T* gw = &gwT[((a * L + c) * m + j) * n + i0];
              for (std::size_t i = 0; i < nb; ++i) gw[i] += acc[i];
            });
      detail::kernel_tap_major_back(gwT, g.grad_buffer(k), geo);
    }
    if (g.requires_grad(x)) {
      T* gx = g.grad_buffer(x).data().data();
      for (std::size_t b = 0; b < geo.batch; ++b)
        for (std::size_t r = p; r < p + geo.h; ++r)
          for (std::size_t cc = p; cc < p + geo.w; ++cc) {
            T* gxr = gx + ((b * geo.h + (r - p)) * geo.w + (cc - p)) * m;
            for (std::size_t j = 0; j < m; ++j) {
              T s = 0;
              detail::channel_blocks(n, [&](std::size_t i0, auto width) {
                const std::size_t nb = width;
                T acc[16] = {};
                for (std::size_t a = 0; a < L; ++a) {
                  const std::size_t oh = detail::source_pos(r, a, geo.stride, geo.ho);
                  if (oh == static_cast<std::size_t>(-1)) continue;
                  for (std::size_t c = 0; c < L; ++c) {
                    const std::size_t ow = detail::source_pos(cc, c, geo.stride, geo.wo);
                    if (ow == static_cast<std::size_t>(-1)) continue;
                    const T* go = &gy[((b * geo.ho + oh) * geo.wo + ow) * n + i0];
                    const T* wr = &wT[((a * L + c) * m + j) * n + i0];
                    for (std::size_t i = 0; i < nb; ++i) acc[i] = detail::madd(wr[i], go[i], acc[i]);
                  }
                }
                s += detail::lane_sum(acc, width);
              });
              gxr[j] += s;
            }
          }
      (void)hp;
      (void)wp;
    }
  });
}

/// Preactivated convolution with one bias per (output kernel, input channel):
/// out[i] = sum_{a,b,j} k[a,b,i,j] * relu(bd[i,j] + x[h+a, w+b, j]).
/// Each activation plane relu(bd[i,j] + x[.,.,j]) is computed once per sample
/// and reused by every kernel position.
template <class T>
NodeId conv2d_dac(Graph<T>& g, NodeId x, NodeId k, NodeId bd, std::size_t stride, Padding padding) {
  const auto& xv = g.value(x);
  const auto& kv = g.value(k);
  const auto& bv = g.value(bd);
  const ConvGeometry geo = conv_geometry(xv.shape(), kv.shape(), stride, padding);
  const std::size_t m = geo.m, n = geo.n, L = geo.L, mn = m * n, wp = geo.wp();
  if (bv.shape() != Shape{n, m}) throw_dims("conv_dac biases", bv.shape(), {n, m});
  const std::vector<T> wT = detail::kernel_tap_major(kv, geo);
  std::vector<T> bdT(mn);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) bdT[j * n + i] = bv[i * m + j];
  BasicTensor<T> out({geo.batch, geo.ho, geo.wo, n});
  std::vector<T> act;
  const std::size_t in_sample = geo.h * geo.w * m;
  for (std::size_t b = 0; b < geo.batch; ++b) {
    detail::dac_activation_cache(&xv[b * in_sample], bdT, geo, act);
    // Several neighbouring output positions share each loaded weight vector.
    auto run = [&](std::size_t oh, std::size_t ow, auto npos) {
      constexpr std::size_t PB = decltype(npos)::value;
      detail::channel_blocks(n, [&](std::size_t i0, auto width) {
        const std::size_t nb = width;
        T acc[PB][16] = {};
        for (std::size_t a = 0; a < L; ++a)
          for (std::size_t c = 0; c < L; ++c) {
            const T* ar = &act[((oh * stride + a) * wp + (ow * stride + c)) * mn + i0];
            const T* wk = &wT[(a * L + c) * mn + i0];
            for (std::size_t j = 0; j < m; ++j) {
              const T* wr = wk + j * n;
              for (std::size_t q = 0; q < PB; ++q) {
                const T* arj = ar + q * stride * mn + j * n;
                for (std::size_t i = 0; i < nb; ++i) acc[q][i] = detail::madd(wr[i], arj[i], acc[q][i]);
              }
            }
          }
        for (std::size_t q = 0; q < PB; ++q) {
          T* o = &out[((b * geo.ho + oh) * geo.wo + ow + q) * n];
          for (std::size_t i = 0; i < nb; ++i) o[i0 + i] = acc[q][i];
        }
      });
    };
    for (std::size_t oh = 0; oh < geo.ho; ++oh) {
      std::size_t ow = 0;
      for (; ow + 4 <= geo.wo; ow += 4) run(oh, ow, std::integral_constant<std::size_t, 4>{});
      for (; ow < geo.wo; ++ow) run(oh, ow, std::integral_constant<std::size_t, 1>{});
    }
  }
  g.count(static_cast<std::uint64_t>(geo.batch) *
          (static_cast<std::uint64_t>(mn) * geo.h * geo.w +
           static_cast<std::uint64_t>(2 * L * L * m) * n * geo.ho * geo.wo));
  return g.record("conv2d_dac", {x, k, bd}, std::move(out), [x, k, bd, geo](Graph<T>& g, NodeId self) {
    const auto& gy = g.grad_buffer(self);
    const auto& xv = g.value(x);
    const auto& kv = g.value(k);
    const auto& bv = g.value(bd);
    const std::size_t m = geo.m, n = geo.n, L = geo.L, mn = m * n, wp = geo.wp(), hp = geo.hp(), p = geo.pad;
    const bool need_k = g.requires_grad(k), need_b = g.requires_grad(bd), need_x = g.requires_grad(x);
    const std::vector<T> wT = detail::kernel_tap_major(kv, geo);
    std::vector<T> bdT(mn);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) bdT[j * n + i] = bv[i * m + j];
    std::vector<T> gwT(need_k ? wT.size() : 0, T(0));
    std::vector<T> gbT(mn, T(0));
    T* gx = need_x ? g.grad_buffer(x).data().data() : nullptr;
    std::vector<T> act;
    const std::size_t in_sample = geo.h * geo.w * m;
    for (std::size_t b = 0; b < geo.batch; ++b) {
      const T* xs = &xv[b * in_sample];
      const T* gys = &gy[b * geo.ho * geo.wo * n];
      if (need_k) {
        detail::dac_activation_cache(xs, bdT, geo, act);
        for (std::size_t a = 0; a < L; ++a)
          for (std::size_t c = 0; c < L; ++c)
            for (std::size_t j = 0; j < m; ++j)
              detail::channel_blocks(n, [&](std::size_t i0, auto width) {
                const std::size_t nb = width;
                T acc[16] = {};
                for (std::size_t oh = 0; oh < geo.ho; ++oh)
                  for (std::size_t ow = 0; ow < geo.wo; ++ow) {
                    const T* ar = &act[((oh * geo.stride + a) * wp + (ow * geo.stride + c)) * mn + j * n + i0];
                    const T* go = gys + (oh * geo.wo + ow) * n + i0;
                    for (std::size_t i = 0; i < nb; ++i) acc[i] = detail::madd(go[i], ar[i], acc[i]);
                  }
                T* gw = &gwT[((a * L + c) * m + j) * n + i0];
                for (std::size_t i = 0; i < nb; ++i) gw[i] += acc[i];
              });
      }
      // Gradient reaching each cached activation, masked by its ReLU, feeds both
      // the input (interior cells only) and the per-channel-pair bias.
      for (std::size_t r = 0; r < hp; ++r)
        for (std::size_t cc = 0; cc < wp; ++cc) {
          const bool inside = r >= p && r < p + geo.h && cc >= p && cc < p + geo.w;
          const T* xr = inside ? xs + ((r - p) * geo.w + (cc - p)) * m : nullptr;
          T* gxr = (inside && gx) ? gx + b * in_sample + ((r - p) * geo.w + (cc - p)) * m : nullptr;
          std::size_t taps[64];
          std::size_t pos[64];
          std::size_t nt = 0;
          for (std::size_t a = 0; a < L; ++a) {
            const std::size_t oh = detail::source_pos(r, a, geo.stride, geo.ho);
            if (oh == static_cast<std::size_t>(-1)) continue;
            for (std::size_t c = 0; c < L; ++c) {
              const std::size_t ow = detail::source_pos(cc, c, geo.stride, geo.wo);
              if (ow == static_cast<std::size_t>(-1)) continue;
              if (nt == 64) throw ContractError("conv_dac: kernel too large for gradient buffer");
              taps[nt] = a * L + c;
              pos[nt] = oh * geo.wo + ow;
              ++nt;
            }
          }
          if (nt == 0) continue;
          for (std::size_t j = 0; j < m; ++j) {
            const T xj = xr ? xr[j] : T(0);
            T s = 0;
            detail::channel_blocks(n, [&](std::size_t i0, auto width) {
              const std::size_t nb = width;
              T acc[16] = {};
              for (std::size_t t = 0; t < nt; ++t) {
                const T* wr = &wT[(taps[t] * m + j) * n + i0];
                const T* go = gys + pos[t] * n + i0;
                for (std::size_t i = 0; i < nb; ++i) acc[i] = detail::madd(wr[i], go[i], acc[i]);
              }
              const T* bj = &bdT[j * n + i0];
              T* gbj = &gbT[j * n + i0];
              for (std::size_t i = 0; i < nb; ++i) {
                const T pre = xr ? bj[i] + xj : bj[i];
                const T gv = pre > T(0) ? acc[i] : T(0);
                gbj[i] += gv;
                acc[i] = gv;
              }
              if (xr) s += detail::lane_sum(acc, width);
            });
            if (gxr) gxr[j] += s;
          }
        }
    }
    if (need_k) detail::kernel_tap_major_back(gwT, g.grad_buffer(k), geo);
    if (need_b) {
      auto& gb = g.grad_buffer(bd);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) gb[i * m + j] += gbT[j * n + i];
    }
  });
}

/// Batch statistics normalization over every axis but the last. beta may be absent.
/// When mean_out/var_out are given they receive the batch moments (biased variance).
template <class T>
NodeId batchnorm_train(Graph<T>& g, NodeId x, NodeId gamma, std::optional<NodeId> beta, T eps,
                       std::vector<T>* mean_out = nullptr, std::vector<T>* var_out = nullptr) {
  const auto& xv = g.value(x);
  const auto& gv = g.value(gamma);
  if (xv.rank() < 2 || gv.rank() != 1 || gv.dim(0) != xv.shape().back())
    throw_dims("batchnorm channels", xv.shape(), gv.shape());
  if (beta && g.value(*beta).shape() != gv.shape()) throw_dims("batchnorm beta", g.value(*beta).shape(), gv.shape());
  const std::size_t C = gv.dim(0), N = xv.size() / C;
  std::vector<T> mu(C, T(0)), var(C, T(0));
  for (std::size_t r = 0; r < N; ++r)
    for (std::size_t c = 0; c < C; ++c) mu[c] += xv[r * C + c];
  for (auto& v : mu) v /= static_cast<T>(N);
  for (std::size_t r = 0; r < N; ++r)
    for (std::size_t c = 0; c < C; ++c) {
      const T d = xv[r * C + c] - mu[c];
      var[c] += d * d;
    }
  for (auto& v : var) v /= static_cast<T>(N);
  std::vector<T> inv(C);
  for (std::size_t c = 0; c < C; ++c) inv[c] = T(1) / std::sqrt(var[c] + eps);
  BasicTensor<T> out(xv.shape());
  BasicTensor<T> xhat(xv.shape());
  for (std::size_t r = 0; r < N; ++r)
    for (std::size_t c = 0; c < C; ++c) {
      const T h = (xv[r * C + c] - mu[c]) * inv[c];
      xhat[r * C + c] = h;
      out[r * C + c] = gv[c] * h + (beta ? g.value(*beta)[c] : T(0));
    }
  g.count(N * C * (beta ? 8 : 7));
  if (mean_out) *mean_out = mu;
  if (var_out) *var_out = var;
  std::vector<NodeId> ins{x, gamma};
  if (beta) ins.push_back(*beta);
  return g.record("batchnorm", ins, std::move(out),
                  [x, gamma, beta, C, N, xhat = std::move(xhat), inv](Graph<T>& g, NodeId self) {
                    const auto& gy = g.grad_buffer(self);
                    const auto& gv = g.value(gamma);
                    std::vector<T> sum_dy(C, T(0)), sum_dy_xhat(C, T(0));
                    for (std::size_t r = 0; r < N; ++r)
                      for (std::size_t c = 0; c < C; ++c) {
                        sum_dy[c] += gy[r * C + c];
                        sum_dy_xhat[c] += gy[r * C + c] * xhat[r * C + c];
                      }
                    if (g.requires_grad(gamma)) {
                      auto& gg = g.grad_buffer(gamma);
                      for (std::size_t c = 0; c < C; ++c) gg[c] += sum_dy_xhat[c];
                    }
                    if (beta && g.requires_grad(*beta)) {
                      auto& gb = g.grad_buffer(*beta);
                      for (std::size_t c = 0; c < C; ++c) gb[c] += sum_dy[c];
                    }
                    if (g.requires_grad(x)) {
                      auto& gx = g.grad_buffer(x);
                      const T invN = T(1) / static_cast<T>(N);
                      for (std::size_t r = 0; r < N; ++r)
                        for (std::size_t c = 0; c < C; ++c) {
                          const std::size_t q = r * C + c;
                          gx[q] += gv[c] * inv[c] *
                                   (gy[q] - invN * sum_dy[c] - xhat[q] * invN * sum_dy_xhat[c]);
                        }
                    }
                  });
}

/// Normalization with fixed statistics: gamma * (x - mean) / sqrt(var + eps) + beta.
template <class T>
NodeId batchnorm_infer(Graph<T>& g, NodeId x, NodeId gamma, std::optional<NodeId> beta,
                       const std::vector<T>& mean, const std::vector<T>& var, T eps) {
  const auto& xv = g.value(x);
  const auto& gv = g.value(gamma);
  if (xv.rank() < 2 || gv.rank() != 1 || gv.dim(0) != xv.shape().back())
    throw_dims("batchnorm channels", xv.shape(), gv.shape());
  const std::size_t C = gv.dim(0), N = xv.size() / C;
  if (mean.size() != C || var.size() != C) throw DimensionError("batchnorm running statistics size mismatch");
  std::vector<T> inv(C), a(C), s(C);
  for (std::size_t c = 0; c < C; ++c) {
    inv[c] = T(1) / std::sqrt(var[c] + eps);
    a[c] = gv[c] * inv[c];
    s[c] = (beta ? g.value(*beta)[c] : T(0)) - mean[c] * a[c];
  }
  BasicTensor<T> out(xv.shape());
  for (std::size_t r = 0; r < N; ++r)
    for (std::size_t c = 0; c < C; ++c) out[r * C + c] = xv[r * C + c] * a[c] + s[c];
  g.count(2 * N * C + C * (beta ? 5 : 4));
  std::vector<NodeId> ins{x, gamma};
  if (beta) ins.push_back(*beta);
  return g.record("batchnorm_infer", ins, std::move(out), [x, gamma, beta, C, N, inv, a, mean](Graph<T>& g, NodeId self) {
    const auto& gy = g.grad_buffer(self);
    const auto& xv = g.value(x);
    if (g.requires_grad(x)) {
      auto& gx = g.grad_buffer(x);
      for (std::size_t r = 0; r < N; ++r)
        for (std::size_t c = 0; c < C; ++c) gx[r * C + c] += gy[r * C + c] * a[c];
    }
    if (g.requires_grad(gamma)) {
      auto& gg = g.grad_buffer(gamma);
      for (std::size_t r = 0; r < N; ++r)
        for (std::size_t c = 0; c < C; ++c) gg[c] += gy[r * C + c] * (xv[r * C + c] - mean[c]) * inv[c];
    }
    if (beta && g.requires_grad(*beta)) {
      auto& gb = g.grad_buffer(*beta);
      for (std::size_t r = 0; r < N; ++r)
        for (std::size_t c = 0; c < C; ++c) gb[c] += gy[r * C + c];
    }
  });
}

/// Mean over the spatial axes: [B,H,W,C] -> [B,C].
template <class T>
NodeId global_avg_pool(Graph<T>& g, NodeId x) {
  const auto& xv = g.value(x);
  detail::expect_rank(xv.shape(), 4, "global average pool");
  const std::size_t B = xv.dim(0), HW = xv.dim(1) * xv.dim(2), C = xv.dim(3);
  BasicTensor<T> out({B, C});
  const T inv = T(1) / static_cast<T>(HW);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t p = 0; p < HW; ++p)
      for (std::size_t c = 0; c < C; ++c) out[b * C + c] += xv[(b * HW + p) * C + c];
    for (std::size_t c = 0; c < C; ++c) out[b * C + c] *= inv;
  }
  g.count(B * C * (HW + 1));
  return g.record("gap", {x}, std::move(out), [x, B, HW, C, inv](Graph<T>& g, NodeId self) {
    const auto& gy = g.grad_buffer(self);
    auto& gx = g.grad_buffer(x);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t p = 0; p < HW; ++p)
        for (std::size_t c = 0; c < C; ++c) gx[(b * HW + p) * C + c] += gy[b * C + c] * inv;
  });
}

/// Residual join. When the branch is spatially smaller or wider than the
/// shortcut, the shortcut is subsampled by the stride and zero-padded in
/// channels (identity shortcut with channel padding).
template <class T>
NodeId shortcut_add(Graph<T>& g, NodeId branch, NodeId shortcut) {
  const auto& bv = g.value(branch);
  const auto& sv = g.value(shortcut);
  if (bv.rank() == 2 && bv.shape() == sv.shape()) return add(g, branch, shortcut);
  detail::expect_rank(bv.shape(), 4, "residual branch");
  detail::expect_rank(sv.shape(), 4, "residual shortcut");
  const std::size_t B = bv.dim(0), H = bv.dim(1), W = bv.dim(2), C = bv.dim(3);
  const std::size_t Hs = sv.dim(1), Ws = sv.dim(2), Cs = sv.dim(3);
  // A stride-s same-padded branch has ceil(Hs/s) rows.
  const std::size_t step = H ? (Hs + H - 1) / H : 0;
  if (sv.dim(0) != B || step == 0 || (Hs + step - 1) / step != H || (Ws + step - 1) / step != W || Cs > C)
    throw_dims("residual join", bv.shape(), sv.shape());
  BasicTensor<T> out = bv;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t w = 0; w < W; ++w) {
        T* o = &out[((b * H + h) * W + w) * C];
        const T* s = &sv[((b * Hs + h * step) * Ws + w * step) * Cs];
        for (std::size_t c = 0; c < Cs; ++c) o[c] += s[c];
      }
  g.count(B * H * W * Cs);
  return g.record("residual_add", {branch, shortcut}, std::move(out),
                  [branch, shortcut, B, H, W, C, Hs, Ws, Cs, step](Graph<T>& g, NodeId self) {
                    const auto& gy = g.grad_buffer(self);
                    if (g.requires_grad(branch)) detail::accumulate(g.grad_buffer(branch), gy);
                    if (g.requires_grad(shortcut)) {
                      auto& gs = g.grad_buffer(shortcut);
                      for (std::size_t b = 0; b < B; ++b)
                        for (std::size_t h = 0; h < H; ++h)
                          for (std::size_t w = 0; w < W; ++w) {
                            const T* o = &gy[((b * H + h) * W + w) * C];
                            T* s = &gs[((b * Hs + h * step) * Ws + w * step) * Cs];
                            for (std::size_t c = 0; c < Cs; ++c) s[c] += o[c];
                          }
                    }
                  });
}

/// Mean softmax cross-entropy of logits [B,K] against integer labels.
template <class T>
NodeId softmax_cross_entropy(Graph<T>& g, NodeId logits, const std::vector<int>& labels) {
  const auto& zv = g.value(logits);
  detail::expect_rank(zv.shape(), 2, "softmax cross-entropy");
  const std::size_t B = zv.dim(0), K = zv.dim(1);
  if (labels.size() != B) throw DimensionError("label count does not match batch");
  BasicTensor<T> prob({B, K});
  T loss = 0;
  for (std::size_t b = 0; b < B; ++b) {
    if (labels[b] < 0 || static_cast<std::size_t>(labels[b]) >= K) throw ContractError("label out of range");
    const T* z = &zv[b * K];
    const T mx = *std::max_element(z, z + K);
    T s = 0;
    for (std::size_t k = 0; k < K; ++k) s += std::exp(z[k] - mx);
    for (std::size_t k = 0; k < K; ++k) prob[b * K + k] = std::exp(z[k] - mx) / s;
    loss += std::log(s) + mx - z[labels[b]];
  }
  loss /= static_cast<T>(B);
  return g.record("softmax_xent", {logits}, BasicTensor<T>::scalar(loss),
                  [logits, labels, B, K, prob = std::move(prob)](Graph<T>& g, NodeId self) {
                    const T gl = g.grad_buffer(self)[0] / static_cast<T>(B);
                    auto& gz = g.grad_buffer(logits);
                    for (std::size_t b = 0; b < B; ++b)
                      for (std::size_t k = 0; k < K; ++k)
                        gz[b * K + k] += gl * (prob[b * K + k] - (static_cast<int>(k) == labels[b] ? T(1) : T(0)));
                  });
}

/// Mean squared error against a constant target of the same shape.
template <class T>
NodeId mse(Graph<T>& g, NodeId out, const BasicTensor<T>& target) {
  const auto& ov = g.value(out);
  if (ov.shape() != target.shape()) throw_dims("mse", ov.shape(), target.shape());
  T loss = 0;
  for (std::size_t i = 0; i < ov.size(); ++i) {
    const T d = ov[i] - target[i];
    loss += d * d;
  }
  const T n = static_cast<T>(ov.size());
  loss /= n;
  return g.record("mse", {out}, BasicTensor<T>::scalar(loss), [out, target, n](Graph<T>& g, NodeId self) {
    const T gl = g.grad_buffer(self)[0];
    const auto& ov = g.value(out);
    auto& go = g.grad_buffer(out);
    for (std::size_t i = 0; i < go.size(); ++i) go[i] += gl * T(2) * (ov[i] - target[i]) / n;
  });
}

}  // namespace dacnet::ops
