#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "bsdg/tensor.hpp"

// Differentiable primitives. Every op works eagerly on values; if any input
// is on a tape, the output is registered there together with an exact
// vector-Jacobian pullback. Binary elementwise ops broadcast a smaller
// operand whose shape is a suffix of the larger one (scalars broadcast
// everywhere).

namespace bsdg::ad {

namespace detail_ops {

template <typename T>
Tape<T>* joint_tape(const Tensor<T>& a, const Tensor<T>& b) {
  Tape<T>* tp = nullptr;
  if (a.on_tape()) tp = a.tape();
  if (b.on_tape()) {
    if (tp)
      detail::require(tp == b.tape(), "ops: operands live on different tapes");
    else
      tp = b.tape();
  }
  return tp;
}

inline bool suffix_compatible(const Shape& big, const Shape& small) {
  if (shape_size(small) == 1) return true;
  if (small.size() > big.size()) return false;
  for (std::size_t i = 0; i < small.size(); ++i)
    if (small[small.size() - 1 - i] != big[big.size() - 1 - i]) return false;
  return true;
}

template <typename T, typename FV, typename FA, typename FB>
Tensor<T> binary_elementwise(const Tensor<T>& a, const Tensor<T>& b, FV fv, FA fa,
                             FB fb, const char* name) {
  const auto& av = a.values();
  const auto& bv = b.values();
  const std::size_t as = av.size(), bs = bv.size();
  Shape oshape;
  if (a.shape() == b.shape()) {
    oshape = a.shape();
  } else if (as >= bs && as % bs == 0 && suffix_compatible(a.shape(), b.shape())) {
    oshape = a.shape();
  } else if (bs % as == 0 && suffix_compatible(b.shape(), a.shape())) {
    oshape = b.shape();
  } else {
    throw contract_violation(std::string(name) + ": shape mismatch " +
                             shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const std::size_t os = std::max(as, bs);
  std::vector<T> ov(os);
  for (std::size_t i = 0; i < os; ++i) ov[i] = fv(av[i % as], bv[i % bs]);
  Tensor<T> out(oshape, std::move(ov));

  Tape<T>* tp = joint_tape(a, b);
  if (tp) {
    const int oid = tp->attach(out);
    const int ida = a.node(), idb = b.node();
    auto abuf = a.buffer(), bbuf = b.buffer(), obuf = out.buffer();
    tp->set_pull(oid, [=](Tape<T>& t) {
      const auto& g = *t.grad_buffer(oid);
      auto* ga = ida >= 0 ? t.grad_buffer(ida) : nullptr;
      auto* gb = idb >= 0 ? t.grad_buffer(idb) : nullptr;
      const auto& A = *abuf;
      const auto& B = *bbuf;
      const auto& Y = *obuf;
      const std::size_t n = Y.size();
      for (std::size_t i = 0; i < n; ++i) {
        const T gi = g[i];
        if (gi == T(0)) continue;
        const std::size_t ia = i % as, ib = i % bs;
        if (ga) (*ga)[ia] += fa(A[ia], B[ib], Y[i], gi);
        if (gb) (*gb)[ib] += fb(A[ia], B[ib], Y[i], gi);
      }
    });
    tp->record_edges(oid, {ida, idb});
  }
  return out;
}

template <typename T, typename FV, typename FG>
Tensor<T> unary_elementwise(const Tensor<T>& x, FV fv, FG fg) {
  const auto& xv = x.values();
  std::vector<T> ov(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) ov[i] = fv(xv[i]);
  Tensor<T> out(x.shape(), std::move(ov));
  if (x.on_tape()) {
    Tape<T>* tp = x.tape();
    const int oid = tp->attach(out);
    const int idx = x.node();
    auto xbuf = x.buffer(), obuf = out.buffer();
    tp->set_pull(oid, [=](Tape<T>& t) {
      const auto& g = *t.grad_buffer(oid);
      auto* gx = t.grad_buffer(idx);
      const auto& X = *xbuf;
      const auto& Y = *obuf;
      for (std::size_t i = 0; i < X.size(); ++i) (*gx)[i] += fg(X[i], Y[i], g[i]);
    });
    tp->record_edges(oid, {idx});
  }
  return out;
}

}  // namespace detail_ops

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail_ops::binary_elementwise<T>(
      a, b, [](T x, T y) { return x + y; },
      [](T, T, T, T g) { return g; }, [](T, T, T, T g) { return g; }, "add");
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail_ops::binary_elementwise<T>(
      a, b, [](T x, T y) { return x - y; },
      [](T, T, T, T g) { return g; }, [](T, T, T, T g) { return -g; }, "sub");
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail_ops::binary_elementwise<T>(
      a, b, [](T x, T y) { return x * y; },
      [](T, T y, T, T g) { return g * y; }, [](T x, T, T, T g) { return g * x; },
      "mul");
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return detail_ops::binary_elementwise<T>(
      a, b, [](T x, T y) { return x / y; },
      [](T, T y, T, T g) { return g / y; },
      [](T x, T y, T, T g) { return -g * x / (y * y); }, "div");
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c) {
  return detail_ops::unary_elementwise<T>(
      x, [c](T v) { return c * v; }, [c](T, T, T g) { return c * g; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T c) {
  return detail_ops::unary_elementwise<T>(
      x, [c](T v) { return v + c; }, [](T, T, T g) { return g; });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& x) {
  return scale(x, T(-1));
}

template <typename T>
Tensor<T> exp_t(const Tensor<T>& x) {
  return detail_ops::unary_elementwise<T>(
      x, [](T v) { return std::exp(v); }, [](T, T y, T g) { return g * y; });
}

template <typename T>
Tensor<T> log_t(const Tensor<T>& x) {
  const auto& xv = x.values();
  for (std::size_t i = 0; i < xv.size(); ++i)
    if (!(xv[i] > T(0)))
      throw std::domain_error("log: non-positive input at flat index " +
                              std::to_string(i));
  return detail_ops::unary_elementwise<T>(
      x, [](T v) { return std::log(v); }, [](T v, T, T g) { return g / v; });
}

template <typename T>
Tensor<T> tanh_t(const Tensor<T>& x) {
  return detail_ops::unary_elementwise<T>(
      x, [](T v) { return std::tanh(v); },
      [](T, T y, T g) { return g * (T(1) - y * y); });
}

// Subgradient 0 at the kink.
template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail_ops::unary_elementwise<T>(
      x, [](T v) { return v > T(0) ? v : T(0); },
      [](T v, T, T g) { return v > T(0) ? g : T(0); });
}

template <typename T>
Tensor<T> sqrt_t(const Tensor<T>& x) {
  const auto& xv = x.values();
  for (std::size_t i = 0; i < xv.size(); ++i)
    if (xv[i] < T(0))
      throw std::domain_error("sqrt: negative input at flat index " +
                              std::to_string(i));
  // Derivative clamped to 0 at x == 0 instead of diverging.
  return detail_ops::unary_elementwise<T>(
      x, [](T v) { return std::sqrt(v); },
      [](T, T y, T g) { return y > T(0) ? g / (T(2) * y) : T(0); });
}

template <typename T>
Tensor<T> stop_gradient(const Tensor<T>& x) {
  return x.detached();
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.rank() == 2 && b.rank() == 2, "matmul: rank-2 operands required");
  const std::size_t M = a.shape()[0], K = a.shape()[1];
  detail::require(b.shape()[0] == K, "matmul: inner dimensions differ, " +
                                         shape_str(a.shape()) + " x " +
                                         shape_str(b.shape()));
  const std::size_t N = b.shape()[1];
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<T> ov(M * N, T(0));
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t k = 0; k < K; ++k) {
      const T aik = av[i * K + k];
      if (aik == T(0)) continue;
      const T* brow = &bv[k * N];
      T* orow = &ov[i * N];
      for (std::size_t j = 0; j < N; ++j) orow[j] += aik * brow[j];
    }
  Tensor<T> out(Shape{M, N}, std::move(ov));

  Tape<T>* tp = detail_ops::joint_tape(a, b);
  if (tp) {
    const int oid = tp->attach(out);
    const int ida = a.node(), idb = b.node();
    auto abuf = a.buffer(), bbuf = b.buffer();
    tp->set_pull(oid, [=](Tape<T>& t) {
      const auto& g = *t.grad_buffer(oid);
      const auto& A = *abuf;
      const auto& B = *bbuf;
      if (ida >= 0) {
        auto& ga = *t.grad_buffer(ida);
        for (std::size_t i = 0; i < M; ++i)
          for (std::size_t k = 0; k < K; ++k) {
            T acc = T(0);
            const T* grow = &g[i * N];
            const T* brow = &B[k * N];
            for (std::size_t j = 0; j < N; ++j) acc += grow[j] * brow[j];
            ga[i * K + k] += acc;
          }
      }
      if (idb >= 0) {
        auto& gb = *t.grad_buffer(idb);
        for (std::size_t k = 0; k < K; ++k)
          for (std::size_t i = 0; i < M; ++i) {
            const T aik = A[i * K + k];
            if (aik == T(0)) continue;
            const T* grow = &g[i * N];
            T* gbrow = &gb[k * N];
            for (std::size_t j = 0; j < N; ++j) gbrow[j] += aik * grow[j];
          }
      }
    });
    tp->record_edges(oid, {ida, idb});
  }
  return out;
}

template <typename T>
Tensor<T> transpose2d(const Tensor<T>& x) {
  detail::require(x.rank() == 2, "transpose2d: rank-2 operand required");
  const std::size_t M = x.shape()[0], N = x.shape()[1];
  const auto& xv = x.values();
  std::vector<T> ov(M * N);
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t j = 0; j < N; ++j) ov[j * M + i] = xv[i * N + j];
  Tensor<T> out(Shape{N, M}, std::move(ov));
  if (x.on_tape()) {
    Tape<T>* tp = x.tape();
    const int oid = tp->attach(out);
    const int idx = x.node();
    tp->set_pull(oid, [=](Tape<T>& t) {
      const auto& g = *t.grad_buffer(oid);
      auto& gx = *t.grad_buffer(idx);
      for (std::size_t i = 0; i < M; ++i)
        for (std::size_t j = 0; j < N; ++j) gx[i * N + j] += g[j * M + i];
    });
    tp->record_edges(oid, {idx});
  }
  return out;
}

// Affine layer: x [N,K] * w [K,M] + b [M].
template <typename T>
Tensor<T> dense(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  return add(matmul(x, w), b);
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  detail::require(shape_size(shape) == x.size(),
                  "reshape: size mismatch, " + shape_str(x.shape()) + " to " +
                      shape_str(shape));
  Tensor<T> out(shape, x.values());
  if (x.on_tape()) {
    Tape<T>* tp = x.tape();
    const int oid = tp->attach(out);
    const int idx = x.node();
    tp->set_pull(oid, [=](Tape<T>& t) {
      const auto& g = *t.grad_buffer(oid);
      auto& gx = *t.grad_buffer(idx);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
    tp->record_edges(oid, {idx});
  }
  return out;
}

// [N, ...] -> [N, rest]
template <typename T>
Tensor<T> flatten2d(const Tensor<T>& x) {
  detail::require(x.rank() >= 1, "flatten2d: empty shape");
  return reshape(x, Shape{x.shape()[0], x.size() / x.shape()[0]});
}

template <typename T>
Tensor<T> concat_last(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.rank() == b.rank() && a.rank() >= 1,
                  "concat_last: rank mismatch");
  for (std::size_t i = 0; i + 1 < a.rank(); ++i)
    detail::require(a.shape()[i] == b.shape()[i],
                    "concat_last: leading dimensions differ");
  const std::size_t la = a.shape().back(), lb = b.shape().back();
  const std::size_t rows = a.size() / la;
  Shape oshape = a.shape();
  oshape.back() = la + lb;
  std::vector<T> ov(rows * (la + lb));
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(&av[r * la], la, &ov[r * (la + lb)]);
    std::copy_n(&bv[r * lb], lb, &ov[r * (la + lb) + la]);
  }
  Tensor<T> out(oshape, std::move(ov));
  Tape<T>* tp = detail_ops::joint_tape(a, b);
  if (tp) {
    const int oid = tp->attach(out);
    const int ida = a.node(), idb = b.node();
    tp->set_pull(oid, [=](Tape<T>& t) {
      const auto& g = *t.grad_buffer(oid);
      auto* ga = ida >= 0 ? t.grad_buffer(ida) : nullptr;
      auto* gb = idb >= 0 ? t.grad_buffer(idb) : nullptr;
      for (std::size_t r = 0; r < rows; ++r) {
        if (ga)
          for (std::size_t i = 0; i < la; ++i)
            (*ga)[r * la + i] += g[r * (la + lb) + i];
        if (gb)
          for (std::size_t i = 0; i < lb; ++i)
            (*gb)[r * lb + i] += g[r * (la + lb) + la + i];
      }
    });
    tp->record_edges(oid, {ida, idb});
  }
  return out;
}

template <typename T>
Tensor<T> slice_last(const Tensor<T>& x, std::size_t start, std::size_t len) {
  detail::require(x.rank() >= 1, "slice_last: empty shape");
  const std::size_t L = x.shape().back();
  detail::require(start + len <= L, "slice_last: range out of bounds");
  const std::size_t rows = x.size() / L;
  Shape oshape = x.shape();
  oshape.back() = len;
  std::vector<T> ov(rows * len);
  const auto& xv = x.values();
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(&xv[r * L + start], len, &ov[r * len]);
  Tensor<T> out(oshape, std::move(ov));
  if (x.on_tape()) {
    Tape<T>* tp = x.tape();
    const int oid = tp->attach(out);
    const int idx = x.node();
    tp->set_pull(oid, [=](Tape<T>& t) {
      const auto& g = *t.grad_buffer(oid);
      auto& gx = *t.grad_buffer(idx);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t i = 0; i < len; ++i)
          gx[r * L + start + i] += g[r * len + i];
    });
    tp->record_edges(oid, {idx});
  }
  return out;
}

// 3x3 convolution, stride 1, zero padding 1. x [N,C,H,W], k [F,C,3,3], b [F].
template <typename T>
Tensor<T> conv2d_3x3(const Tensor<T>& x, const Tensor<T>& k, const Tensor<T>& b) {
  detail::require(x.rank() == 4, "conv2d: input must be [N,C,H,W]");
  detail::require(k.rank() == 4 && k.shape()[2] == 3 && k.shape()[3] == 3,
                  "conv2d: kernel must be [F,C,3,3]");
  const std::size_t N = x.shape()[0], C = x.shape()[1], H = x.shape()[2],
                    W = x.shape()[3];
  const std::size_t F = k.shape()[0];
  detail::require(k.shape()[1] == C, "conv2d: channel mismatch");
  detail::require(b.size() == F, "conv2d: bias size mismatch");
  const auto& X = x.values();
  const auto& K = k.values();
  const auto& B = b.values();
  std::vector<T> ov(N * F * H * W);
  auto xat = [C, H, W](std::size_t n, std::size_t c, std::size_t y, std::size_t xx) {
    return ((n * C + c) * H + y) * W + xx;
  };
  auto kat = [C](std::size_t f, std::size_t c, std::size_t dy, std::size_t dx) {
    return ((f * C + c) * 3 + dy) * 3 + dx;
  };
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t f = 0; f < F; ++f)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t xx = 0; xx < W; ++xx) {
          T acc = B[f];
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t dy = 0; dy < 3; ++dy) {
              const std::size_t iy = y + dy;
              if (iy < 1 || iy > H) continue;
              for (std::size_t dx = 0; dx < 3; ++dx) {
                const std::size_t ix = xx + dx;
                if (ix < 1 || ix > W) continue;
                acc += X[xat(n, c, iy - 1, ix - 1)] * K[kat(f, c, dy, dx)];
              }
            }
          ov[((n * F + f) * H + y) * W + xx] = acc;
        }
  Tensor<T> out(Shape{N, F, H, W}, std::move(ov));
  Tape<T>* tp = detail_ops::joint_tape(x, k);
  if (b.on_tape()) {
    if (tp)
      detail::require(tp == b.tape(), "ops: operands live on different tapes");
    else
      tp = b.tape();
  }
  if (tp) {
    const int oid = tp->attach(out);
    const int idx = x.node(), idk = k.node(), idb = b.node();
    auto xbuf = x.buffer(), kbuf = k.buffer();
    tp->set_pull(oid, [=](Tape<T>& t) {
      const auto& g = *t.grad_buffer(oid);
      auto* gx = idx >= 0 ? t.grad_buffer(idx) : nullptr;
      auto* gk = idk >= 0 ? t.grad_buffer(idk) : nullptr;
      auto* gb = idb >= 0 ? t.grad_buffer(idb) : nullptr;
      const auto& X2 = *xbuf;
      const auto& K2 = *kbuf;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t f = 0; f < F; ++f)
          for (std::size_t y = 0; y < H; ++y)
            for (std::size_t xx = 0; xx < W; ++xx) {
              const T gi = g[((n * F + f) * H + y) * W + xx];
              if (gi == T(0)) continue;
              if (gb) (*gb)[f] += gi;
              for (std::size_t c = 0; c < C; ++c)
                for (std::size_t dy = 0; dy < 3; ++dy) {
                  const std::size_t iy = y + dy;
                  if (iy < 1 || iy > H) continue;
                  for (std::size_t dx = 0; dx < 3; ++dx) {
                    const std::size_t ix = xx + dx;
                    if (ix < 1 || ix > W) continue;
                    const std::size_t xi = xat(n, c, iy - 1, ix - 1);
                    const std::size_t ki = kat(f, c, dy, dx);
                    if (gx) (*gx)[xi] += gi * K2[ki];
                    if (gk) (*gk)[ki] += gi * X2[xi];
                  }
                }
            }
    });
    tp->record_edges(oid, {idx, idk, idb});
  }
  return out;
}

// 2x2 max pooling, stride 2; ties resolve to the first element in scan order.
template <typename T>
Tensor<T> maxpool2d_2x2(const Tensor<T>& x) {
  detail::require(x.rank() == 4, "maxpool2d: input must be [N,C,H,W]");
  const std::size_t N = x.shape()[0], C = x.shape()[1], H = x.shape()[2],
                    W = x.shape()[3];
  detail::require(H % 2 == 0 && W % 2 == 0, "maxpool2d: H and W must be even");
  const std::size_t OH = H / 2, OW = W / 2;
  const auto& X = x.values();
  std::vector<T> ov(N * C * OH * OW);
  auto arg = std::make_shared<std::vector<std::uint32_t>>(ov.size());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < OH; ++y)
        for (std::size_t xx = 0; xx < OW; ++xx) {
          std::size_t best = ((n * C + c) * H + 2 * y) * W + 2 * xx;
          T bv = X[best];
          for (std::size_t dy = 0; dy < 2; ++dy)
            for (std::size_t dx = 0; dx < 2; ++dx) {
              const std::size_t xi = ((n * C + c) * H + 2 * y + dy) * W + 2 * xx + dx;
              if (X[xi] > bv) {
                bv = X[xi];
                best = xi;
              }
            }
          const std::size_t oi = ((n * C + c) * OH + y) * OW + xx;
          ov[oi] = bv;
          (*arg)[oi] = static_cast<std::uint32_t>(best);
        }
  Tensor<T> out(Shape{N, C, OH, OW}, std::move(ov));
  if (x.on_tape()) {
    Tape<T>* tp = x.tape();
    const int oid = tp->attach(out);
    const int idx = x.node();
    tp->set_pull(oid, [=](Tape<T>& t) {
      const auto& g = *t.grad_buffer(oid);
      auto& gx = *t.grad_buffer(idx);
      for (std::size_t i = 0; i < g.size(); ++i) gx[(*arg)[i]] += g[i];
    });
    tp->record_edges(oid, {idx});
  }
  return out;
}

template <typename T>
Tensor<T> softmax_last(const Tensor<T>& x) {
  detail::require(x.rank() >= 1, "softmax_last: empty shape");
  const std::size_t C = x.shape().back();
  const std::size_t rows = x.size() / C;
  const auto& xv = x.values();
  std::vector<T> ov(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = &xv[r * C];
    T* yr = &ov[r * C];
    T m = xr[0];
    for (std::size_t j = 1; j < C; ++j) m = std::max(m, xr[j]);
    T s = T(0);
    for (std::size_t j = 0; j < C; ++j) {
      yr[j] = std::exp(xr[j] - m);
      s += yr[j];
    }
    for (std::size_t j = 0; j < C; ++j) yr[j] /= s;
  }
  Tensor<T> out(x.shape(), std::move(ov));
  if (x.on_tape()) {
    Tape<T>* tp = x.tape();
    const int oid = tp->attach(out);
    const int idx = x.node();
    auto obuf = out.buffer();
    tp->set_pull(oid, [=](Tape<T>& t) {
      const auto& g = *t.grad_buffer(oid);
      auto& gx = *t.grad_buffer(idx);
      const auto& Y = *obuf;
      for (std::size_t r = 0; r < rows; ++r) {
        T dot = T(0);
        for (std::size_t j = 0; j < C; ++j) dot += g[r * C + j] * Y[r * C + j];
        for (std::size_t j = 0; j < C; ++j)
          gx[r * C + j] += Y[r * C + j] * (g[r * C + j] - dot);
      }
    });
    tp->record_edges(oid, {idx});
  }
  return out;
}

template <typename T>
Tensor<T> log_softmax_last(const Tensor<T>& x) {
  detail::require(x.rank() >= 1, "log_softmax_last: empty shape");
  const std::size_t C = x.shape().back();
  const std::size_t rows = x.size() / C;
  const auto& xv = x.values();
  std::vector<T> ov(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = &xv[r * C];
    T* yr = &ov[r * C];
    T m = xr[0];
    for (std::size_t j = 1; j < C; ++j) m = std::max(m, xr[j]);
    T s = T(0);
    for (std::size_t j = 0; j < C; ++j) s += std::exp(xr[j] - m);
    const T lse = m + std::log(s);
    for (std::size_t j = 0; j < C; ++j) yr[j] = xr[j] - lse;
  }
  Tensor<T> out(x.shape(), std::move(ov));
  if (x.on_tape()) {
    Tape<T>* tp = x.tape();
    const int oid = tp->attach(out);
    const int idx = x.node();
    auto obuf = out.buffer();
    tp->set_pull(oid, [=](Tape<T>& t) {
      const auto& g = *t.grad_buffer(oid);
      auto& gx = *t.grad_buffer(idx);
      const auto& Y = *obuf;
      for (std::size_t r = 0; r < rows; ++r) {
        T gs = T(0);
        for (std::size_t j = 0; j < C; ++j) gs += g[r * C + j];
        for (std::size_t j = 0; j < C; ++j)
          gx[r * C + j] += g[r * C + j] - std::exp(Y[r * C + j]) * gs;
      }
    });
    tp->record_edges(oid, {idx});
  }
  return out;
}

namespace detail_ops {

// Shared plumbing for reductions over the leading (batch) axis.
template <typename T>
Shape batch_reduced_shape(const Tensor<T>& x, const char* name) {
  detail::require(x.rank() >= 1 && x.shape()[0] >= 1,
                  std::string(name) + ": needs a leading batch axis");
  if (x.rank() == 1) return Shape{1};
  return Shape(x.shape().begin() + 1, x.shape().end());
}

}  // namespace detail_ops

template <typename T>
Tensor<T> mean_over_batch(const Tensor<T>& x) {
  Shape oshape = detail_ops::batch_reduced_shape(x, "mean_over_batch");
  const std::size_t N = x.shape()[0];
  const std::size_t R = x.size() / N;
  const auto& xv = x.values();
  std::vector<T> ov(R, T(0));
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t r = 0; r < R; ++r) ov[r] += xv[n * R + r];
  for (auto& v : ov) v /= static_cast<T>(N);
  Tensor<T> out(oshape, std::move(ov));
  if (x.on_tape()) {
    Tape<T>* tp = x.tape();
    const int oid = tp->attach(out);
    const int idx = x.node();
    tp->set_pull(oid, [=](Tape<T>& t) {
      const auto& g = *t.grad_buffer(oid);
      auto& gx = *t.grad_buffer(idx);
      const T inv = T(1) / static_cast<T>(N);
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t r = 0; r < R; ++r) gx[n * R + r] += g[r] * inv;
    });
    tp->record_edges(oid, {idx});
  }
  return out;
}

template <typename T>
Tensor<T> sum_over_batch(const Tensor<T>& x) {
  Shape oshape = detail_ops::batch_reduced_shape(x, "sum_over_batch");
  const std::size_t N = x.shape()[0];
  const std::size_t R = x.size() / N;
  const auto& xv = x.values();
  std::vector<T> ov(R, T(0));
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t r = 0; r < R; ++r) ov[r] += xv[n * R + r];
  Tensor<T> out(oshape, std::move(ov));
  if (x.on_tape()) {
    Tape<T>* tp = x.tape();
    const int oid = tp->attach(out);
    const int idx = x.node();
    tp->set_pull(oid, [=](Tape<T>& t) {
      const auto& g = *t.grad_buffer(oid);
      auto& gx = *t.grad_buffer(idx);
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t r = 0; r < R; ++r) gx[n * R + r] += g[r];
    });
    tp->record_edges(oid, {idx});
  }
  return out;
}

// Population variance over the batch axis.
template <typename T>
Tensor<T> var_over_batch(const Tensor<T>& x) {
  Shape oshape = detail_ops::batch_reduced_shape(x, "var_over_batch");
  const std::size_t N = x.shape()[0];
  const std::size_t R = x.size() / N;
  const auto& xv = x.values();
  auto mu = std::make_shared<std::vector<T>>(R, T(0));
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t r = 0; r < R; ++r) (*mu)[r] += xv[n * R + r];
  for (auto& v : *mu) v /= static_cast<T>(N);
  std::vector<T> ov(R, T(0));
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t r = 0; r < R; ++r) {
      const T d = xv[n * R + r] - (*mu)[r];
      ov[r] += d * d;
    }
  for (auto& v : ov) v /= static_cast<T>(N);
  Tensor<T> out(oshape, std::move(ov));
  if (x.on_tape()) {
    Tape<T>* tp = x.tape();
    const int oid = tp->attach(out);
    const int idx = x.node();
    auto xbuf = x.buffer();
    tp->set_pull(oid, [=](Tape<T>& t) {
      const auto& g = *t.grad_buffer(oid);
      auto& gx = *t.grad_buffer(idx);
      const auto& X = *xbuf;
      const T invN = T(1) / static_cast<T>(N);
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t r = 0; r < R; ++r)
          gx[n * R + r] += g[r] * T(2) * (X[n * R + r] - (*mu)[r]) * invN;
    });
    tp->record_edges(oid, {idx});
  }
  return out;
}

// Population standard deviation over the batch axis, fused so the pullback
// can clamp the sigma = 0 direction to 0 instead of dividing by zero.
template <typename T>
Tensor<T> std_over_batch(const Tensor<T>& x) {
  Shape oshape = detail_ops::batch_reduced_shape(x, "std_over_batch");
  const std::size_t N = x.shape()[0];
  const std::size_t R = x.size() / N;
  const auto& xv = x.values();
  auto mu = std::make_shared<std::vector<T>>(R, T(0));
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t r = 0; r < R; ++r) (*mu)[r] += xv[n * R + r];
  for (auto& v : *mu) v /= static_cast<T>(N);
  std::vector<T> ov(R, T(0));
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t r = 0; r < R; ++r) {
      const T d = xv[n * R + r] - (*mu)[r];
      ov[r] += d * d;
    }
  for (auto& v : ov) v = std::sqrt(v / static_cast<T>(N));
  Tensor<T> out(oshape, std::move(ov));
  if (x.on_tape()) {
    Tape<T>* tp = x.tape();
    const int oid = tp->attach(out);
    const int idx = x.node();
    auto xbuf = x.buffer(), obuf = out.buffer();
    tp->set_pull(oid, [=](Tape<T>& t) {
      const auto& g = *t.grad_buffer(oid);
      auto& gx = *t.grad_buffer(idx);
      const auto& X = *xbuf;
      const auto& S = *obuf;
      const T invN = T(1) / static_cast<T>(N);
      for (std::size_t r = 0; r < R; ++r) {
        if (!(S[r] > T(0))) continue;
        const T c = g[r] * invN / S[r];
        for (std::size_t n = 0; n < N; ++n)
          gx[n * R + r] += c * (X[n * R + r] - (*mu)[r]);
      }
    });
    tp->record_edges(oid, {idx});
  }
  return out;
}

// Max over the batch axis; ties resolve to the lowest batch index.
template <typename T>
Tensor<T> max_over_batch(const Tensor<T>& x) {
  Shape oshape = detail_ops::batch_reduced_shape(x, "max_over_batch");
  const std::size_t N = x.shape()[0];
  const std::size_t R = x.size() / N;
  const auto& xv = x.values();
  std::vector<T> ov(R);
  auto arg = std::make_shared<std::vector<std::uint32_t>>(R, 0);
  for (std::size_t r = 0; r < R; ++r) {
    T best = xv[r];
    for (std::size_t n = 1; n < N; ++n)
      if (xv[n * R + r] > best) {
        best = xv[n * R + r];
        (*arg)[r] = static_cast<std::uint32_t>(n);
      }
    ov[r] = best;
  }
  Tensor<T> out(oshape, std::move(ov));
  if (x.on_tape()) {
    Tape<T>* tp = x.tape();
    const int oid = tp->attach(out);
    const int idx = x.node();
    tp->set_pull(oid, [=](Tape<T>& t) {
      const auto& g = *t.grad_buffer(oid);
      auto& gx = *t.grad_buffer(idx);
      for (std::size_t r = 0; r < R; ++r)
        gx[static_cast<std::size_t>((*arg)[r]) * R + r] += g[r];
    });
    tp->record_edges(oid, {idx});
  }
  return out;
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  const auto& xv = x.values();
  T s = T(0);
  for (auto v : xv) s += v;
  Tensor<T> out = Tensor<T>::scalar(s);
  if (x.on_tape()) {
    Tape<T>* tp = x.tape();
    const int oid = tp->attach(out);
    const int idx = x.node();
    const std::size_t n = x.size();
    tp->set_pull(oid, [=](Tape<T>& t) {
      const T g = (*t.grad_buffer(oid))[0];
      auto& gx = *t.grad_buffer(idx);
      for (std::size_t i = 0; i < n; ++i) gx[i] += g;
    });
    tp->record_edges(oid, {idx});
  }
  return out;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
  return scale(sum_all(x), T(1) / static_cast<T>(x.size()));
}

// Euclidean norm of the whole tensor; gradient clamped to 0 at the origin.
template <typename T>
Tensor<T> l2_norm(const Tensor<T>& x) {
  const auto& xv = x.values();
  T s = T(0);
  for (auto v : xv) s += v * v;
  const T nrm = std::sqrt(s);
  Tensor<T> out = Tensor<T>::scalar(nrm);
  if (x.on_tape()) {
    Tape<T>* tp = x.tape();
    const int oid = tp->attach(out);
    const int idx = x.node();
    auto xbuf = x.buffer();
    tp->set_pull(oid, [=](Tape<T>& t) {
      const T g = (*t.grad_buffer(oid))[0];
      auto& gx = *t.grad_buffer(idx);
      const auto& X = *xbuf;
      if (!(nrm > T(0))) return;
      for (std::size_t i = 0; i < X.size(); ++i) gx[i] += g * X[i] / nrm;
    });
    tp->record_edges(oid, {idx});
  }
  return out;
}

template <typename T>
Tensor<T> onehot(const std::vector<int>& labels, std::size_t num_classes) {
  std::vector<T> v(labels.size() * num_classes, T(0));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    detail::require(labels[i] >= 0 && static_cast<std::size_t>(labels[i]) < num_classes,
                    "onehot: label out of range");
    v[i * num_classes + static_cast<std::size_t>(labels[i])] = T(1);
  }
  return Tensor<T>(Shape{labels.size(), num_classes}, std::move(v));
}

// Mean cross-entropy from raw logits [N,C].
template <typename T>
Tensor<T> ce_mean(const Tensor<T>& logits, const std::vector<int>& labels) {
  detail::require(logits.rank() == 2 && logits.shape()[0] == labels.size(),
                  "ce_mean: logits [N,C] and N labels required");
  auto y = onehot<T>(labels, logits.shape()[1]);
  auto picked = sum_all(mul(y, log_softmax_last(logits)));
  return scale(picked, T(-1) / static_cast<T>(labels.size()));
}

// Mean KL(softmax(a) || softmax(b)) over rows, from raw logits.
template <typename T>
Tensor<T> kl_mean(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.shape() == b.shape() && a.rank() == 2,
                  "kl_mean: matching [N,C] logits required");
  auto pa = softmax_last(a);
  auto d = sub(log_softmax_last(a), log_softmax_last(b));
  return scale(sum_all(mul(pa, d)), T(1) / static_cast<T>(a.shape()[0]));
}

// Row-wise argmax of a [N,C] tensor. Plain values, not differentiable.
template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& x) {
  detail::require(x.rank() == 2, "argmax_rows: rank-2 input required");
  const std::size_t N = x.shape()[0], C = x.shape()[1];
  const auto& xv = x.values();
  std::vector<int> out(N, 0);
  for (std::size_t i = 0; i < N; ++i) {
    T best = xv[i * C];
    for (std::size_t j = 1; j < C; ++j)
      if (xv[i * C + j] > best) {
        best = xv[i * C + j];
        out[i] = static_cast<int>(j);
      }
  }
  return out;
}

}  // namespace bsdg::ad
