#pragma once

#include <cmath>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "clan/tensor.hpp"

namespace clan {

enum class PoolMode { Avg, Max };
enum class ResampleMode { Nearest, Bilinear };

namespace detail {

/// C[MxN] += op(A)[MxK] * op(B)[KxN], reductions in ascending k order.
template <typename T>
void gemm_acc(bool ta, bool tb, std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
  if (!tb) {
    // Four k-steps per pass keep c[j] in a register; the additions still
    // happen in ascending k order.
    auto a_at = [&](std::size_t i, std::size_t p) { return ta ? A[p * M + i] : A[i * K + p]; };
    for (std::size_t i = 0; i < M; ++i) {
      T* c = C + i * N;
      std::size_t p = 0;
      for (; p + 4 <= K; p += 4) {
        const T a0 = a_at(i, p), a1 = a_at(i, p + 1), a2 = a_at(i, p + 2), a3 = a_at(i, p + 3);
        const T* b0 = B + p * N;
        const T* b1 = b0 + N;
        const T* b2 = b1 + N;
        const T* b3 = b2 + N;
        for (std::size_t j = 0; j < N; ++j) {
          T v = c[j];
          v += a0 * b0[j];
          v += a1 * b1[j];
          v += a2 * b2[j];
          v += a3 * b3[j];
          c[j] = v;
        }
      }
      for (; p < K; ++p) {
        const T a = a_at(i, p);
        const T* b = B + p * N;
        for (std::size_t j = 0; j < N; ++j) c[j] += a * b[j];
      }
    }
  } else {
    // Transpose the strided operands once so the inner loop stays contiguous;
    // each output still accumulates over k in ascending order.
    std::vector<T> bt;
    if (tb) {
      bt.resize(K * N);
      for (std::size_t j = 0; j < N; ++j)
        for (std::size_t p = 0; p < K; ++p) bt[p * N + j] = B[j * K + p];
      B = bt.data();
    }
    gemm_acc(ta, false, M, N, K, A, B, C);
  }
}

inline void require_rank(const Shape& s, std::size_t r, const char* op) {
  if (s.size() != r)
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " + to_string(s));
}

}  // namespace detail

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank(a.shape(), 2, "matmul");
  detail::require_rank(b.shape(), 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) throw DimensionError("matmul: inner extents differ, " + to_string(a.shape()) + " x " + to_string(b.shape()));
  std::vector<T> out(m * n, T(0));
  detail::gemm_acc(false, false, m, n, k, a.data().data(), b.data().data(), out.data());
  auto ai = a.impl(), bi = b.impl();
  return detail::make_result<T>({m, n}, std::move(out), {a, b}, [ai, bi, m, n, k](const TensorImpl<T>& o) {
    if (T* ga = detail::grad_sink(ai)) detail::gemm_acc(false, true, m, k, n, o.grad.data(), bi->data.data(), ga);
    if (T* gb = detail::grad_sink(bi)) detail::gemm_acc(true, false, k, n, m, ai->data.data(), o.grad.data(), gb);
  });
}

/// Batched product over the leading axis: out[i] = op(a[i]) * op(b[i]).
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool trans_a = false, bool trans_b = false) {
  detail::require_rank(a.shape(), 3, "bmm");
  detail::require_rank(b.shape(), 3, "bmm");
  const std::size_t batch = a.dim(0);
  const std::size_t m = trans_a ? a.dim(2) : a.dim(1);
  const std::size_t k = trans_a ? a.dim(1) : a.dim(2);
  const std::size_t kb = trans_b ? b.dim(2) : b.dim(1);
  const std::size_t n = trans_b ? b.dim(1) : b.dim(2);
  if (b.dim(0) != batch || kb != k)
    throw DimensionError("bmm: incompatible shapes " + to_string(a.shape()) + " and " + to_string(b.shape()));
  std::vector<T> out(batch * m * n, T(0));
  for (std::size_t i = 0; i < batch; ++i)
    detail::gemm_acc(trans_a, trans_b, m, n, k, a.data().data() + i * m * k, b.data().data() + i * k * n,
                     out.data() + i * m * n);
  auto ai = a.impl(), bi = b.impl();
  return detail::make_result<T>(
      {batch, m, n}, std::move(out), {a, b}, [ai, bi, batch, m, n, k, trans_a, trans_b](const TensorImpl<T>& o) {
        T* ga = detail::grad_sink(ai);
        T* gb = detail::grad_sink(bi);
        for (std::size_t i = 0; i < batch; ++i) {
          const T* g = o.grad.data() + i * m * n;
          const T* A = ai->data.data() + i * m * k;
          const T* B = bi->data.data() + i * k * n;
          if (ga) {
            T* d = ga + i * m * k;
            // dop(A) = g * op(B)^T
            if (!trans_a) detail::gemm_acc(false, !trans_b, m, k, n, g, B, d);
            else detail::gemm_acc(trans_b, true, k, m, n, B, g, d);
          }
          if (gb) {
            T* d = gb + i * k * n;
            // dop(B) = op(A)^T * g
            if (!trans_b) detail::gemm_acc(!trans_a, false, k, n, m, A, g, d);
            else detail::gemm_acc(true, trans_a, n, k, m, g, A, d);
          }
        }
      });
}

/// 1x1 convolution: per position out = W * x + bias, W is [c_out x c_in].
/// Accepts any input of rank >= 2 laid out as (batch, channels, positions...).
template <typename T>
Tensor<T> pointwise(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  if (x.rank() < 2) throw DimensionError("pointwise: input rank < 2, got " + to_string(x.shape()));
  detail::require_rank(w.shape(), 2, "pointwise");
  const std::size_t batch = x.dim(0), cin = x.dim(1), cout = w.dim(0);
  if (w.dim(1) != cin)
    throw DimensionError("pointwise: weight " + to_string(w.shape()) + " does not match input " + to_string(x.shape()));
  if (bias.numel() != cout) throw DimensionError("pointwise: bias " + to_string(bias.shape()) + " for " + std::to_string(cout) + " outputs");
  const std::size_t n = x.numel() / (batch * cin);
  Shape out_shape = x.shape();
  out_shape[1] = cout;
  std::vector<T> out(batch * cout * n);
  for (std::size_t b = 0; b < batch; ++b) {
    T* o = out.data() + b * cout * n;
    for (std::size_t c = 0; c < cout; ++c) std::fill(o + c * n, o + (c + 1) * n, bias[c]);
    detail::gemm_acc(false, false, cout, n, cin, w.data().data(), x.data().data() + b * cin * n, o);
  }
  auto xi = x.impl(), wi = w.impl(), bi = bias.impl();
  return detail::make_result<T>(std::move(out_shape), std::move(out), {x, w, bias},
                                [xi, wi, bi, batch, cin, cout, n](const TensorImpl<T>& o) {
                                  T* gx = detail::grad_sink(xi);
                                  T* gw = detail::grad_sink(wi);
                                  T* gbias = detail::grad_sink(bi);
                                  for (std::size_t b = 0; b < batch; ++b) {
                                    const T* g = o.grad.data() + b * cout * n;
                                    if (gx) detail::gemm_acc(true, false, cin, n, cout, wi->data.data(), g, gx + b * cin * n);
                                    if (gw) detail::gemm_acc(false, true, cout, cin, n, g, xi->data.data() + b * cin * n, gw);
                                    if (gbias)
                                      for (std::size_t c = 0; c < cout; ++c) {
                                        T s = 0;
                                        for (std::size_t p = 0; p < n; ++p) s += g[c * n + p];
                                        gbias[c] += s;
                                      }
                                  }
                                });
}

/// 2-D cross-correlation plus bias (im2col + GEMM per sample).
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& k, const Tensor<T>& bias, std::size_t stride = 1,
                 std::size_t padding = 0) {
  detail::require_rank(x.shape(), 4, "conv2d");
  detail::require_rank(k.shape(), 4, "conv2d");
  const std::size_t batch = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t cout = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  if (k.dim(1) != cin)
    throw DimensionError("conv2d: kernel " + to_string(k.shape()) + " does not match input " + to_string(x.shape()));
  if (bias.numel() != cout) throw DimensionError("conv2d: bias " + to_string(bias.shape()) + " for " + std::to_string(cout) + " outputs");
  if (kh % 2 == 0 || kw % 2 == 0) throw ConfigError("conv2d: kernel extents must be odd, got " + to_string(k.shape()));
  if (stride == 0) throw ConfigError("conv2d: stride must be positive");
  const std::size_t ph = h + 2 * padding, pw = w + 2 * padding;
  if (ph < kh || pw < kw || (ph - kh) % stride || (pw - kw) % stride)
    throw ConfigError("conv2d: output extent not integral for input " + to_string(x.shape()) + ", kernel " +
                      to_string(k.shape()) + ", stride " + std::to_string(stride) + ", padding " + std::to_string(padding));
  const std::size_t oh = (ph - kh) / stride + 1, ow = (pw - kw) / stride + 1;
  const std::size_t ckk = cin * kh * kw, npos = oh * ow;

  auto cols = std::make_shared<std::vector<T>>(batch * ckk * npos, T(0));
  const T* xd = x.data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    T* col = cols->data() + b * ckk * npos;
    for (std::size_t c = 0; c < cin; ++c)
      for (std::size_t u = 0; u < kh; ++u)
        for (std::size_t v = 0; v < kw; ++v) {
          T* row = col + ((c * kh + u) * kw + v) * npos;
          for (std::size_t i = 0; i < oh; ++i) {
            const long yy = long(i * stride + u) - long(padding);
            if (yy < 0 || yy >= long(h)) continue;
            const T* src = xd + ((b * cin + c) * h + std::size_t(yy)) * w;
            for (std::size_t j = 0; j < ow; ++j) {
              const long xx = long(j * stride + v) - long(padding);
              if (xx >= 0 && xx < long(w)) row[i * ow + j] = src[xx];
            }
          }
        }
  }
  std::vector<T> out(batch * cout * npos);
  for (std::size_t b = 0; b < batch; ++b) {
    T* o = out.data() + b * cout * npos;
    for (std::size_t c = 0; c < cout; ++c) std::fill(o + c * npos, o + (c + 1) * npos, bias[c]);
    detail::gemm_acc(false, false, cout, npos, ckk, k.data().data(), cols->data() + b * ckk * npos, o);
  }
  auto xi = x.impl(), ki = k.impl(), bi = bias.impl();
  return detail::make_result<T>(
      {batch, cout, oh, ow}, std::move(out), {x, k, bias},
      [xi, ki, bi, cols, batch, cin, h, w, cout, kh, kw, oh, ow, ckk, npos, stride, padding](const TensorImpl<T>& o) {
        T* gx = detail::grad_sink(xi);
        T* gk = detail::grad_sink(ki);
        T* gbias = detail::grad_sink(bi);
        std::vector<T> dcol(gx ? ckk * npos : 0);
        for (std::size_t b = 0; b < batch; ++b) {
          const T* g = o.grad.data() + b * cout * npos;
          if (gk) detail::gemm_acc(false, true, cout, ckk, npos, g, cols->data() + b * ckk * npos, gk);
          if (gbias)
            for (std::size_t c = 0; c < cout; ++c) {
              T s = 0;
              for (std::size_t p = 0; p < npos; ++p) s += g[c * npos + p];
              gbias[c] += s;
            }
          if (gx) {
            std::fill(dcol.begin(), dcol.end(), T(0));
            detail::gemm_acc(true, false, ckk, npos, cout, ki->data.data(), g, dcol.data());
            for (std::size_t c = 0; c < cin; ++c)
              for (std::size_t u = 0; u < kh; ++u)
                for (std::size_t v = 0; v < kw; ++v) {
                  const T* row = dcol.data() + ((c * kh + u) * kw + v) * npos;
                  for (std::size_t i = 0; i < oh; ++i) {
                    const long yy = long(i * stride + u) - long(padding);
                    if (yy < 0 || yy >= long(h)) continue;
                    T* dst = gx + ((b * cin + c) * h + std::size_t(yy)) * w;
                    for (std::size_t j = 0; j < ow; ++j) {
                      const long xx = long(j * stride + v) - long(padding);
                      if (xx >= 0 && xx < long(w)) dst[xx] += row[i * ow + j];
                    }
                  }
                }
          }
        }
      });
}

/// Windowed spatial mean or max. Max routes the gradient to the first
/// maximal element of each window in row-major order.
template <typename T>
Tensor<T> pool2d(const Tensor<T>& x, PoolMode mode, std::size_t window, std::size_t stride) {
  detail::require_rank(x.shape(), 4, "pool2d");
  const std::size_t batch = x.dim(0), ch = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (window == 0 || stride == 0) throw ConfigError("pool2d: window and stride must be positive");
  if (window > h || window > w)
    throw ConfigError("pool2d: window " + std::to_string(window) + " larger than spatial extent of " + to_string(x.shape()));
  if ((h - window) % stride || (w - window) % stride)
    throw ConfigError("pool2d: window " + std::to_string(window) + "/stride " + std::to_string(stride) +
                      " does not tile " + to_string(x.shape()));
  const std::size_t oh = (h - window) / stride + 1, ow = (w - window) / stride + 1;
  const std::size_t planes = batch * ch;
  std::vector<T> out(planes * oh * ow);
  auto argmax = std::make_shared<std::vector<std::size_t>>(mode == PoolMode::Max ? out.size() : 0);
  const T* xd = x.data().data();
  const T inv = T(1) / T(window * window);
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        const std::size_t oidx = (p * oh + i) * ow + j;
        if (mode == PoolMode::Avg) {
          T s = 0;
          for (std::size_t u = 0; u < window; ++u)
            for (std::size_t v = 0; v < window; ++v) s += xd[(p * h + i * stride + u) * w + j * stride + v];
          out[oidx] = s * inv;
        } else {
          std::size_t best = (p * h + i * stride) * w + j * stride;
          for (std::size_t u = 0; u < window; ++u)
            for (std::size_t v = 0; v < window; ++v) {
              const std::size_t idx = (p * h + i * stride + u) * w + j * stride + v;
              if (xd[idx] > xd[best]) best = idx;
            }
          out[oidx] = xd[best];
          (*argmax)[oidx] = best;
        }
      }
  auto xi = x.impl();
  return detail::make_result<T>(
      {batch, ch, oh, ow}, std::move(out), {x},
      [xi, argmax, mode, planes, h, w, oh, ow, window, stride, inv](const TensorImpl<T>& o) {
        T* gx = detail::grad_sink(xi);
        if (!gx) return;
        for (std::size_t p = 0; p < planes; ++p)
          for (std::size_t i = 0; i < oh; ++i)
            for (std::size_t j = 0; j < ow; ++j) {
              const std::size_t oidx = (p * oh + i) * ow + j;
              const T g = o.grad[oidx];
              if (mode == PoolMode::Max) {
                gx[(*argmax)[oidx]] += g;
              } else {
                for (std::size_t u = 0; u < window; ++u)
                  for (std::size_t v = 0; v < window; ++v) gx[(p * h + i * stride + u) * w + j * stride + v] += g * inv;
              }
            }
      });
}

/// Per-position reduction across channels to a single channel.
template <typename T>
Tensor<T> channel_reduce(const Tensor<T>& x, PoolMode mode) {
  detail::require_rank(x.shape(), 4, "channel_reduce");
  const std::size_t batch = x.dim(0), ch = x.dim(1), n = x.dim(2) * x.dim(3);
  std::vector<T> out(batch * n);
  auto argmax = std::make_shared<std::vector<std::size_t>>(mode == PoolMode::Max ? out.size() : 0);
  const T* xd = x.data().data();
  const T inv = T(1) / T(ch);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t p = 0; p < n; ++p) {
      if (mode == PoolMode::Avg) {
        T s = 0;
        for (std::size_t c = 0; c < ch; ++c) s += xd[(b * ch + c) * n + p];
        out[b * n + p] = s * inv;
      } else {
        std::size_t best = b * ch * n + p;
        for (std::size_t c = 1; c < ch; ++c) {
          const std::size_t idx = (b * ch + c) * n + p;
          if (xd[idx] > xd[best]) best = idx;
        }
        out[b * n + p] = xd[best];
        (*argmax)[b * n + p] = best;
      }
    }
  auto xi = x.impl();
  return detail::make_result<T>({batch, 1, x.dim(2), x.dim(3)}, std::move(out), {x},
                                [xi, argmax, mode, batch, ch, n, inv](const TensorImpl<T>& o) {
                                  T* gx = detail::grad_sink(xi);
                                  if (!gx) return;
                                  for (std::size_t b = 0; b < batch; ++b)
                                    for (std::size_t p = 0; p < n; ++p) {
                                      const T g = o.grad[b * n + p];
                                      if (mode == PoolMode::Max) gx[(*argmax)[b * n + p]] += g;
                                      else
                                        for (std::size_t c = 0; c < ch; ++c) gx[(b * ch + c) * n + p] += g * inv;
                                    }
                                });
}

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& xs);

/// Channel 0: per-position mean over channels; channel 1: per-position max.
template <typename T>
Tensor<T> channel_pool(const Tensor<T>& x) {
  return concat_channels<T>({channel_reduce(x, PoolMode::Avg), channel_reduce(x, PoolMode::Max)});
}

/// Softmax along the last axis, stabilized by subtracting the row maximum.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  if (x.rank() < 1) throw DimensionError("softmax_rows: empty shape");
  const std::size_t n = x.shape().back(), rows = x.numel() / n;
  std::vector<T> out(x.numel());
  const T* xd = x.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xd + r * n;
    T mx = row[0];
    for (std::size_t j = 0; j < n; ++j) {
      if (std::isnan(row[j])) throw NumericError("softmax_rows: NaN input");
      mx = std::max(mx, row[j]);
    }
    if (!std::isfinite(mx)) throw NumericError("softmax_rows: non-finite input");
    T s = 0;
    for (std::size_t j = 0; j < n; ++j) {
      out[r * n + j] = std::exp(row[j] - mx);
      s += out[r * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] /= s;
  }
  auto xi = x.impl();
  return detail::make_result<T>(x.shape(), std::move(out), {x}, [xi, rows, n](const TensorImpl<T>& o) {
    T* gx = detail::grad_sink(xi);
    if (!gx) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = o.data.data() + r * n;
      const T* g = o.grad.data() + r * n;
      T dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += g[j] * y[j];
      for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += y[j] * (g[j] - dot);
    }
  });
}

/// Channel-axis concatenation in argument order.
template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& xs) {
  if (xs.empty()) throw UsageError("concat_channels: no inputs");
  if (xs.size() == 1) return xs.front();
  const Shape& ref = xs.front().shape();
  if (ref.size() < 2) throw DimensionError("concat_channels: rank < 2, got " + to_string(ref));
  const std::size_t batch = ref[0];
  const std::size_t inner = xs.front().numel() / (batch * ref[1]);
  std::size_t total = 0;
  std::vector<std::size_t> chans;
  for (const auto& x : xs) {
    const Shape& s = x.shape();
    bool ok = s.size() == ref.size() && s[0] == batch;
    for (std::size_t d = 2; ok && d < s.size(); ++d) ok = s[d] == ref[d];
    if (!ok) throw DimensionError("concat_channels: " + to_string(s) + " incompatible with " + to_string(ref));
    chans.push_back(s[1]);
    total += s[1];
  }
  std::vector<T> out(batch * total * inner);
  std::size_t off = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const T* src = xs[i].data().data();
    for (std::size_t b = 0; b < batch; ++b)
      std::copy(src + b * chans[i] * inner, src + (b + 1) * chans[i] * inner, out.data() + (b * total + off) * inner);
    off += chans[i];
  }
  Shape out_shape = ref;
  out_shape[1] = total;
  std::vector<std::shared_ptr<TensorImpl<T>>> impls;
  for (const auto& x : xs) impls.push_back(x.impl());
  return detail::make_result<T>(std::move(out_shape), std::move(out), xs,
                                [impls, chans, batch, total, inner](const TensorImpl<T>& o) {
                                  std::size_t off = 0;
                                  for (std::size_t i = 0; i < impls.size(); ++i) {
                                    if (T* g = detail::grad_sink(impls[i]))
                                      for (std::size_t b = 0; b < batch; ++b)
                                        for (std::size_t q = 0; q < chans[i] * inner; ++q)
                                          g[b * chans[i] * inner + q] += o.grad[(b * total + off) * inner + q];
                                    off += chans[i];
                                  }
                                });
}

/// Channels [start, start + count) of x.
template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, std::size_t start, std::size_t count) {
  if (x.rank() < 2) throw DimensionError("slice_channels: rank < 2, got " + to_string(x.shape()));
  const std::size_t batch = x.dim(0), ch = x.dim(1), inner = x.numel() / (batch * ch);
  if (count == 0 || start + count > ch)
    throw DimensionError("slice_channels: range [" + std::to_string(start) + ", " + std::to_string(start + count) +
                         ") outside " + to_string(x.shape()));
  std::vector<T> out(batch * count * inner);
  const T* xd = x.data().data();
  for (std::size_t b = 0; b < batch; ++b)
    std::copy(xd + (b * ch + start) * inner, xd + (b * ch + start + count) * inner, out.data() + b * count * inner);
  Shape s = x.shape();
  s[1] = count;
  auto xi = x.impl();
  return detail::make_result<T>(std::move(s), std::move(out), {x}, [xi, batch, ch, start, count, inner](const TensorImpl<T>& o) {
    T* g = detail::grad_sink(xi);
    if (!g) return;
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t q = 0; q < count * inner; ++q) g[(b * ch + start) * inner + q] += o.grad[b * count * inner + q];
  });
}

/// Same data, new shape.
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel_of(shape) != x.numel())
    throw DimensionError("reshape: " + to_string(x.shape()) + " -> " + to_string(shape) + " changes element count");
  auto xi = x.impl();
  return detail::make_result<T>(std::move(shape), x.values(), {x}, [xi](const TensorImpl<T>& o) {
    if (T* g = detail::grad_sink(xi))
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
  });
}

namespace detail {

/// Broadcast b against a: either identical shapes, or b is a single-channel
/// map (batch x 1 x spatial...) replicated across a's channels.
inline bool channel_broadcast(const Shape& a, const Shape& b) {
  if (a == b) return false;
  if (a.size() >= 2 && b.size() == a.size() && b[0] == a[0] && b[1] == 1) {
    bool same = true;
    for (std::size_t d = 2; d < a.size(); ++d) same = same && a[d] == b[d];
    if (same) return true;
  }
  throw DimensionError("incompatible broadcast between " + to_string(a) + " and " + to_string(b));
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  const bool bc = detail::channel_broadcast(a.shape(), b.shape());
  const std::size_t batch = bc ? a.dim(0) : 1, ch = bc ? a.dim(1) : 1, inner = a.numel() / (batch * ch);
  std::vector<T> out(a.numel());
  for (std::size_t bb = 0; bb < batch; ++bb)
    for (std::size_t c = 0; c < ch; ++c)
      for (std::size_t p = 0; p < inner; ++p) {
        const std::size_t i = (bb * ch + c) * inner + p;
        out[i] = a[i] + b[bc ? bb * inner + p : i];
      }
  auto ai = a.impl(), bi = b.impl();
  return detail::make_result<T>(a.shape(), std::move(out), {a, b}, [ai, bi, bc, batch, ch, inner](const TensorImpl<T>& o) {
    T* ga = detail::grad_sink(ai);
    T* gb = detail::grad_sink(bi);
    for (std::size_t bb = 0; bb < batch; ++bb)
      for (std::size_t c = 0; c < ch; ++c)
        for (std::size_t p = 0; p < inner; ++p) {
          const std::size_t i = (bb * ch + c) * inner + p;
          if (ga) ga[i] += o.grad[i];
          if (gb) gb[bc ? bb * inner + p : i] += o.grad[i];
        }
  });
}

/// Elementwise product; b may be a single-channel map gating every channel of a.
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  const bool bc = detail::channel_broadcast(a.shape(), b.shape());
  const std::size_t batch = bc ? a.dim(0) : 1, ch = bc ? a.dim(1) : 1, inner = a.numel() / (batch * ch);
  std::vector<T> out(a.numel());
  for (std::size_t bb = 0; bb < batch; ++bb)
    for (std::size_t c = 0; c < ch; ++c)
      for (std::size_t p = 0; p < inner; ++p) {
        const std::size_t i = (bb * ch + c) * inner + p;
        out[i] = a[i] * b[bc ? bb * inner + p : i];
      }
  auto ai = a.impl(), bi = b.impl();
  return detail::make_result<T>(a.shape(), std::move(out), {a, b}, [ai, bi, bc, batch, ch, inner](const TensorImpl<T>& o) {
    T* ga = detail::grad_sink(ai);
    T* gb = detail::grad_sink(bi);
    for (std::size_t bb = 0; bb < batch; ++bb)
      for (std::size_t c = 0; c < ch; ++c)
        for (std::size_t p = 0; p < inner; ++p) {
          const std::size_t i = (bb * ch + c) * inner + p;
          const std::size_t j = bc ? bb * inner + p : i;
          if (ga) ga[i] += o.grad[i] * bi->data[j];
          if (gb) gb[j] += o.grad[i] * ai->data[i];
        }
  });
}

namespace detail {

template <typename T, typename Fwd, typename Deriv>
Tensor<T> unary(const Tensor<T>& x, Fwd fwd, Deriv deriv) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(x[i]);
  auto xi = x.impl();
  return make_result<T>(x.shape(), std::move(out), {x}, [xi, deriv](const TensorImpl<T>& o) {
    if (T* g = grad_sink(xi))
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * deriv(xi->data[i], o.data[i]);
  });
}

}  // namespace detail

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary(x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  return detail::unary(x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v)); },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T s) {
  return detail::unary(x, [s](T v) { return v * s; }, [s](T, T) { return s; });
}

/// a * x + b elementwise.
template <typename T>
Tensor<T> affine(const Tensor<T>& x, T a, T b) {
  return detail::unary(x, [a, b](T v) { return a * v + b; }, [a](T, T) { return a; });
}

/// Sum of all elements as a 1-element tensor.
template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = 0;
  for (T v : x.data()) s += v;
  auto xi = x.impl();
  return detail::make_result<T>({1}, {s}, {x}, [xi](const TensorImpl<T>& o) {
    if (T* g = detail::grad_sink(xi))
      for (std::size_t i = 0; i < xi->data.size(); ++i) g[i] += o.grad[0];
  });
}

/// Spatial resize. Upsampling interpolates (nearest: floor index map;
/// bilinear: half-pixel centers, edge clamped). Downsampling by an integer
/// factor f is f x f average pooling in either mode.
template <typename T>
Tensor<T> resample(const Tensor<T>& x, std::size_t target_h, std::size_t target_w, ResampleMode mode) {
  detail::require_rank(x.shape(), 4, "resample");
  if (target_h == 0 || target_w == 0) throw ConfigError("resample: target extents must be >= 1");
  const std::size_t h = x.dim(2), w = x.dim(3);
  if (target_h == h && target_w == w) return x;
  if (target_h <= h && target_w <= w) {
    if (h % target_h || w % target_w || h / target_h != w / target_w)
      throw ConfigError("resample: downsample " + to_string(x.shape()) + " -> " + std::to_string(target_h) + "x" +
                        std::to_string(target_w) + " needs one integer factor");
    const std::size_t f = h / target_h;
    return pool2d(x, PoolMode::Avg, f, f);
  }
  if (target_h < h || target_w < w) throw ConfigError("resample: mixed up/down resize is not supported");

  // Each output pixel is a fixed weighted sum of at most four source pixels.
  struct Tap {
    std::size_t src[4];
    T wt[4];
  };
  std::vector<Tap> taps(target_h * target_w);
  for (std::size_t i = 0; i < target_h; ++i)
    for (std::size_t j = 0; j < target_w; ++j) {
      Tap& t = taps[i * target_w + j];
      if (mode == ResampleMode::Nearest) {
        const std::size_t si = i * h / target_h, sj = j * w / target_w;
        t = Tap{{si * w + sj, 0, 0, 0}, {T(1), T(0), T(0), T(0)}};
      } else {
        auto axis = [](std::size_t o, std::size_t in, std::size_t out, std::size_t& i0, std::size_t& i1, T& frac) {
          T src = (T(o) + T(0.5)) * T(in) / T(out) - T(0.5);
          if (src < T(0)) src = T(0);
          i0 = std::min(std::size_t(src), in - 1);
          i1 = std::min(i0 + 1, in - 1);
          frac = src - T(i0);
        };
        std::size_t y0, y1, x0, x1;
        T fy, fx;
        axis(i, h, target_h, y0, y1, fy);
        axis(j, w, target_w, x0, x1, fx);
        t = Tap{{y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1},
                {(T(1) - fy) * (T(1) - fx), (T(1) - fy) * fx, fy * (T(1) - fx), fy * fx}};
      }
    }
  const std::size_t planes = x.dim(0) * x.dim(1), in_n = h * w, out_n = target_h * target_w;
  std::vector<T> out(planes * out_n);
  const T* xd = x.data().data();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t q = 0; q < out_n; ++q) {
      const Tap& t = taps[q];
      T s = 0;
      for (int k = 0; k < 4; ++k) s += t.wt[k] * xd[p * in_n + t.src[k]];
      out[p * out_n + q] = s;
    }
  auto xi = x.impl();
  return detail::make_result<T>({x.dim(0), x.dim(1), target_h, target_w}, std::move(out), {x},
                                [xi, taps = std::move(taps), planes, in_n, out_n](const TensorImpl<T>& o) {
                                  T* g = detail::grad_sink(xi);
                                  if (!g) return;
                                  for (std::size_t p = 0; p < planes; ++p)
                                    for (std::size_t q = 0; q < out_n; ++q)
                                      for (int k = 0; k < 4; ++k) g[p * in_n + taps[q].src[k]] += taps[q].wt[k] * o.grad[p * out_n + q];
                                });
}

/// Spatial mean per channel: [b x c x h x w] -> [b x c].
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  detail::require_rank(x.shape(), 4, "global_avg_pool");
  const std::size_t planes = x.dim(0) * x.dim(1), n = x.dim(2) * x.dim(3);
  const T inv = T(1) / T(n);
  std::vector<T> out(planes);
  for (std::size_t p = 0; p < planes; ++p) {
    T s = 0;
    for (std::size_t q = 0; q < n; ++q) s += x[p * n + q];
    out[p] = s * inv;
  }
  auto xi = x.impl();
  return detail::make_result<T>({x.dim(0), x.dim(1)}, std::move(out), {x}, [xi, planes, n, inv](const TensorImpl<T>& o) {
    if (T* g = detail::grad_sink(xi))
      for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t q = 0; q < n; ++q) g[p * n + q] += o.grad[p] * inv;
  });
}

/// Fully connected layer: x [b x in], w [out x in], bias [out] -> [b x out].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  detail::require_rank(x.shape(), 2, "linear");
  detail::require_rank(w.shape(), 2, "linear");
  const std::size_t batch = x.dim(0), in = x.dim(1), out_n = w.dim(0);
  if (w.dim(1) != in) throw DimensionError("linear: weight " + to_string(w.shape()) + " does not match input " + to_string(x.shape()));
  if (bias.numel() != out_n) throw DimensionError("linear: bias " + to_string(bias.shape()) + " for " + std::to_string(out_n) + " outputs");
  std::vector<T> out(batch * out_n);
  for (std::size_t b = 0; b < batch; ++b) std::copy(bias.data().begin(), bias.data().end(), out.begin() + b * out_n);
  detail::gemm_acc(false, true, batch, out_n, in, x.data().data(), w.data().data(), out.data());
  auto xi = x.impl(), wi = w.impl(), bi = bias.impl();
  return detail::make_result<T>({batch, out_n}, std::move(out), {x, w, bias}, [xi, wi, bi, batch, in, out_n](const TensorImpl<T>& o) {
    if (T* gx = detail::grad_sink(xi)) detail::gemm_acc(false, false, batch, in, out_n, o.grad.data(), wi->data.data(), gx);
    if (T* gw = detail::grad_sink(wi)) detail::gemm_acc(true, false, out_n, in, batch, o.grad.data(), xi->data.data(), gw);
    if (T* gb = detail::grad_sink(bi))
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t k = 0; k < out_n; ++k) gb[k] += o.grad[b * out_n + k];
  });
}

/// Mean over the batch of -log softmax(logits)[label], via log-sum-exp.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  detail::require_rank(logits.shape(), 2, "cross_entropy");
  const std::size_t batch = logits.dim(0), k = logits.dim(1);
  if (labels.size() != batch)
    throw DataError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " + std::to_string(batch));
  auto probs = std::make_shared<std::vector<T>>(batch * k);
  std::vector<int> lab(labels.begin(), labels.end());
  T total = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    if (lab[b] < 0 || std::size_t(lab[b]) >= k)
      throw DataError("cross_entropy: label " + std::to_string(lab[b]) + " outside [0, " + std::to_string(k) + ")");
    const T* row = logits.data().data() + b * k;
    T mx = row[0];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    T s = 0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(row[j] - mx);
    const T lse = mx + std::log(s);
    for (std::size_t j = 0; j < k; ++j) (*probs)[b * k + j] = std::exp(row[j] - lse);
    total += lse - row[lab[b]];
  }
  const T inv = T(1) / T(batch);
  auto li = logits.impl();
  return detail::make_result<T>({1}, {total * inv}, {logits}, [li, probs, lab, batch, k, inv](const TensorImpl<T>& o) {
    T* g = detail::grad_sink(li);
    if (!g) return;
    const T go = o.grad[0] * inv;
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t j = 0; j < k; ++j)
        g[b * k + j] += go * ((*probs)[b * k + j] - (std::size_t(lab[b]) == j ? T(1) : T(0)));
  });
}

}  // namespace clan
