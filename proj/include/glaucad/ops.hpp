#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "glaucad/error.hpp"
#include "glaucad/rng.hpp"
#include "glaucad/tensor.hpp"

namespace glaucad {

enum class Mode { train, eval };

struct Conv2dParams {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

namespace detail {

inline void require_rank(const Shape& s, std::size_t r, const char* op, const char* what) {
  if (s.size() != r) {
    throw ShapeError(std::string(op) + ": " + what + " must have rank " + std::to_string(r) +
                     ", got " + shape_str(s));
  }
}

// Output columns [lo, hi) for which ow*stride - pad + k lands inside [0, extent).
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t out_extent, std::size_t extent,
                                                       std::size_t stride, std::size_t pad,
                                                       std::size_t k) {
  const auto off = static_cast<std::ptrdiff_t>(k) - static_cast<std::ptrdiff_t>(pad);
  const auto s = static_cast<std::ptrdiff_t>(stride);
  std::ptrdiff_t lo = off >= 0 ? 0 : (-off + s - 1) / s;
  std::ptrdiff_t hi = (static_cast<std::ptrdiff_t>(extent) - 1 - off);
  hi = hi < 0 ? 0 : hi / s + 1;
  hi = std::min<std::ptrdiff_t>(hi, static_cast<std::ptrdiff_t>(out_extent));
  if (lo > hi) lo = hi;
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

}  // namespace detail

namespace detail {

struct ConvGeometry {
  std::size_t Ci, H, W, Kh, Kw, Ho, Wo, stride, pad;
  std::size_t K() const { return Ci * Kh * Kw; }
  std::size_t P() const { return Ho * Wo; }
};

// col[k][p] = x[ci][oh*s + kh - pad][ow*s + kw - pad] (0 outside), with
// k = (ci*Kh + kh)*Kw + kw and p = oh*Wo + ow.
template <class T>
void im2col(const T* x, const ConvGeometry& g, T* col) {
  const std::size_t P = g.P();
  std::size_t k = 0;
  for (std::size_t ci = 0; ci < g.Ci; ++ci) {
    const T* xp = x + ci * g.H * g.W;
    for (std::size_t kh = 0; kh < g.Kh; ++kh) {
      const auto [oh_lo, oh_hi] = valid_range(g.Ho, g.H, g.stride, g.pad, kh);
      for (std::size_t kw = 0; kw < g.Kw; ++kw, ++k) {
        const auto [ow_lo, ow_hi] = valid_range(g.Wo, g.W, g.stride, g.pad, kw);
        T* c = col + k * P;
        std::fill(c, c + P, T(0));
        for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
          const T* xr = xp + (oh * g.stride + kh - g.pad) * g.W;
          T* cr = c + oh * g.Wo;
          for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) cr[ow] = xr[ow * g.stride + kw - g.pad];
        }
      }
    }
  }
}

// Inverse scatter of im2col: gx[...] += gcol[k][p].
template <class T>
void col2im_add(const T* gcol, const ConvGeometry& g, T* gx) {
  const std::size_t P = g.P();
  std::size_t k = 0;
  for (std::size_t ci = 0; ci < g.Ci; ++ci) {
    T* gp = gx + ci * g.H * g.W;
    for (std::size_t kh = 0; kh < g.Kh; ++kh) {
      const auto [oh_lo, oh_hi] = valid_range(g.Ho, g.H, g.stride, g.pad, kh);
      for (std::size_t kw = 0; kw < g.Kw; ++kw, ++k) {
        const auto [ow_lo, ow_hi] = valid_range(g.Wo, g.W, g.stride, g.pad, kw);
        const T* c = gcol + k * P;
        for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
          T* gr = gp + (oh * g.stride + kh - g.pad) * g.W;
          const T* cr = c + oh * g.Wo;
          for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) gr[ow * g.stride + kw - g.pad] += cr[ow];
        }
      }
    }
  }
}

inline constexpr std::size_t kConvTile = 512;

// rows[r][p] += sum over j of coef[r*cstride + j*jstride] * src[j][p], for
// four rows at once; j ascends, so each element sees the same addition order
// as a scalar loop.
template <class T>
void axpy_rows4(T* __restrict r0, T* __restrict r1, T* __restrict r2, T* __restrict r3,
                const T* coef, std::size_t cstride, std::size_t jstride, const T* src,
                std::size_t J, std::size_t P, std::size_t p0, std::size_t p1) {
  for (std::size_t j = 0; j < J; ++j) {
    const T a0 = coef[j * jstride], a1 = coef[cstride + j * jstride], a2 = coef[2 * cstride + j * jstride],
            a3 = coef[3 * cstride + j * jstride];
    const T* __restrict s = src + j * P;
    for (std::size_t p = p0; p < p1; ++p) {
      const T v = s[p];
      r0[p] += a0 * v;
      r1[p] += a1 * v;
      r2[p] += a2 * v;
      r3[p] += a3 * v;
    }
  }
}

template <class T>
void axpy_rows1(T* __restrict r0, const T* coef, std::size_t jstride, const T* src, std::size_t J,
                std::size_t P, std::size_t p0, std::size_t p1) {
  for (std::size_t j = 0; j < J; ++j) {
    const T a0 = coef[j * jstride];
    const T* __restrict s = src + j * P;
    for (std::size_t p = p0; p < p1; ++p) r0[p] += a0 * s[p];
  }
}

// out[r][p] += sum_j coef(r, j) * src[j][p] for R rows, tiled over p.
template <class T>
void rows_times_matrix(T* out, std::size_t R, const T* coef, std::size_t cstride, std::size_t jstride,
                       const T* src, std::size_t J, std::size_t P) {
  for (std::size_t p0 = 0; p0 < P; p0 += kConvTile) {
    const std::size_t p1 = std::min(P, p0 + kConvTile);
    std::size_t r = 0;
    for (; r + 4 <= R; r += 4) {
      axpy_rows4(out + r * P, out + (r + 1) * P, out + (r + 2) * P, out + (r + 3) * P, coef + r * cstride,
                 cstride, jstride, src, J, P, p0, p1);
    }
    for (; r < R; ++r) axpy_rows1(out + r * P, coef + r * cstride, jstride, src, J, P, p0, p1);
  }
}

template <class T>
void transpose(const T* src, std::size_t rows, std::size_t cols, T* dst) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
}

}  // namespace detail

// 2-D cross-correlation over an N x Cin x H x W batch. Each output starts
// from the bias and accumulates over (ci, kh, kw) in row-major order.
template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 Conv2dParams p = {}, Tape<T>* tape = nullptr) {
  detail::require_rank(input.shape(), 4, "conv2d", "input");
  detail::require_rank(weight.shape(), 4, "conv2d", "weight");
  detail::require_rank(bias.shape(), 1, "conv2d", "bias");
  if (p.stride == 0) throw ConfigError("conv2d: stride must be positive");
  const std::size_t N = input.dim(0), Ci = input.dim(1), H = input.dim(2), W = input.dim(3);
  const std::size_t Co = weight.dim(0), Kh = weight.dim(2), Kw = weight.dim(3);
  if (weight.dim(1) != Ci) {
    throw ShapeError("conv2d: input has " + std::to_string(Ci) + " channels but weight " +
                     shape_str(weight.shape()) + " expects " + std::to_string(weight.dim(1)));
  }
  if (bias.dim(0) != Co) {
    throw ShapeError("conv2d: bias length " + std::to_string(bias.dim(0)) +
                     " != output channels " + std::to_string(Co));
  }
  if (Kh > H + 2 * p.padding || Kw > W + 2 * p.padding) {
    throw ShapeError("conv2d: kernel " + std::to_string(Kh) + "x" + std::to_string(Kw) +
                     " larger than padded input " + shape_str(input.shape()));
  }
  const detail::ConvGeometry g{Ci, H, W, Kh, Kw, (H + 2 * p.padding - Kh) / p.stride + 1,
                               (W + 2 * p.padding - Kw) / p.stride + 1, p.stride, p.padding};
  const std::size_t K = g.K(), P = g.P();

  Tensor<T> out({N, Co, g.Ho, g.Wo});
  const T* x = input.data().data();
  const T* w = weight.data().data();
  const T* b = bias.data().data();
  T* y = out.data().data();
  std::vector<T> col(K * P);
  for (std::size_t n = 0; n < N; ++n) {
    detail::im2col(x + n * Ci * H * W, g, col.data());
    T* yn = y + n * Co * P;
    for (std::size_t co = 0; co < Co; ++co) std::fill(yn + co * P, yn + (co + 1) * P, b[co]);
    detail::rows_times_matrix(yn, Co, w, K, 1, col.data(), K, P);
  }
  check_finite<T>(out.data(), "conv2d");

  if (Tape<T>::wants(tape, {&input, &weight, &bias})) {
    auto xi = input.handle(), wi = weight.handle(), bi = bias.handle(), yo = out.handle();
    tape->record("conv2d", {xi, wi, bi}, yo, [=] {
      const T* gy = yo->grad.data();
      if (bi->requires_grad) {
        bi->ensure_grad();
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t co = 0; co < Co; ++co) {
            const T* gr = gy + (n * Co + co) * P;
            T acc = 0;
            for (std::size_t i = 0; i < P; ++i) acc += gr[i];
            bi->grad[co] += acc;
          }
      }
      const bool want_x = xi->requires_grad, want_w = wi->requires_grad;
      if (!want_x && !want_w) return;
      if (want_x) xi->ensure_grad();
      if (want_w) wi->ensure_grad();
      std::vector<T> buf(K * P), colt(want_w ? K * P : 0);
      // Transposed weights so gcol rows read coefficients with unit stride in co.
      std::vector<T> wt;
      if (want_x) {
        wt.resize(K * Co);
        for (std::size_t co = 0; co < Co; ++co)
          for (std::size_t k = 0; k < K; ++k) wt[k * Co + co] = wi->data[co * K + k];
      }
      for (std::size_t n = 0; n < N; ++n) {
        const T* gyn = gy + n * Co * P;
        if (want_w) {
          // gw (Co x K) += gy (Co x P) * col^T, vectorized along K.
          detail::im2col(xi->data.data() + n * Ci * H * W, g, buf.data());
          detail::transpose(buf.data(), K, P, colt.data());
          detail::rows_times_matrix(wi->grad.data(), Co, gyn, P, 1, colt.data(), P, K);
        }
        if (want_x) {
          std::fill(buf.begin(), buf.end(), T(0));
          detail::rows_times_matrix(buf.data(), K, wt.data(), Co, 1, gyn, Co, P);
          detail::col2im_add(buf.data(), g, xi->grad.data() + n * Ci * H * W);
        }
      }
    });
  }
  return out;
}

// Non-overlapping max pooling (stride == window). Ties go to the first
// element in row-major window order.
template <class T>
Tensor<T> maxpool2d(const Tensor<T>& input, std::size_t window = 2, Tape<T>* tape = nullptr) {
  detail::require_rank(input.shape(), 4, "maxpool2d", "input");
  const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  if (window == 0 || H % window != 0 || W % window != 0) {
    throw ShapeError("maxpool2d: spatial extent " + std::to_string(H) + "x" + std::to_string(W) +
                     " not divisible by window " + std::to_string(window));
  }
  const std::size_t Ho = H / window, Wo = W / window;
  Tensor<T> out({N, C, Ho, Wo});
  std::vector<std::size_t> argmax(out.numel());
  const T* x = input.data().data();
  T* y = out.data().data();
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    for (std::size_t oh = 0; oh < Ho; ++oh) {
      for (std::size_t ow = 0; ow < Wo; ++ow) {
        std::size_t best = nc * H * W + oh * window * W + ow * window;
        for (std::size_t i = 0; i < window; ++i) {
          for (std::size_t j = 0; j < window; ++j) {
            const std::size_t idx = nc * H * W + (oh * window + i) * W + ow * window + j;
            if (x[idx] > x[best]) best = idx;
          }
        }
        const std::size_t o = nc * Ho * Wo + oh * Wo + ow;
        y[o] = x[best];
        argmax[o] = best;
      }
    }
  }
  if (Tape<T>::wants(tape, {&input})) {
    auto xi = input.handle(), yo = out.handle();
    tape->record("maxpool2d", {xi}, yo, [xi, yo, argmax = std::move(argmax)] {
      xi->ensure_grad();
      for (std::size_t o = 0; o < argmax.size(); ++o) xi->grad[argmax[o]] += yo->grad[o];
    });
  }
  return out;
}

template <class T>
Tensor<T> relu(const Tensor<T>& input, Tape<T>* tape = nullptr) {
  Tensor<T> out(input.shape());
  auto x = input.data();
  auto y = out.data();
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
  if (Tape<T>::wants(tape, {&input})) {
    auto xi = input.handle(), yo = out.handle();
    tape->record("relu", {xi}, yo, [xi, yo] {
      xi->ensure_grad();
      for (std::size_t i = 0; i < xi->data.size(); ++i) {
        if (xi->data[i] > T(0)) xi->grad[i] += yo->grad[i];
      }
    });
  }
  return out;
}

// Keep-mask for inverted dropout: 1 = kept. One uniform draw per element.
inline std::vector<std::uint8_t> dropout_mask(std::size_t n, double rate, Rng& rng) {
  std::vector<std::uint8_t> mask(n);
  for (auto& m : mask) m = rng.uniform() >= rate ? 1 : 0;
  return mask;
}

// Inverted dropout: identity in eval mode; in train mode drops with
// probability `rate` and scales survivors by 1/(1-rate).
template <class T>
Tensor<T> dropout(const Tensor<T>& input, double rate, Mode mode, Rng* rng,
                  Tape<T>* tape = nullptr) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw ConfigError("dropout: rate must be in [0, 1), got " + std::to_string(rate));
  }
  if (mode == Mode::eval || rate == 0.0) return input;
  if (rng == nullptr) throw ConfigError("dropout: train mode requires an Rng");
  auto mask = dropout_mask(input.numel(), rate, *rng);
  const T scale = T(1.0 / (1.0 - rate));
  Tensor<T> out(input.shape());
  auto x = input.data();
  auto y = out.data();
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = mask[i] ? x[i] * scale : T(0);
  if (Tape<T>::wants(tape, {&input})) {
    auto xi = input.handle(), yo = out.handle();
    tape->record("dropout", {xi}, yo, [xi, yo, scale, mask = std::move(mask)] {
      xi->ensure_grad();
      for (std::size_t i = 0; i < mask.size(); ++i) {
        if (mask[i]) xi->grad[i] += yo->grad[i] * scale;
      }
    });
  }
  return out;
}

// N x C x H x W -> N x C spatial mean.
template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& input, Tape<T>* tape = nullptr) {
  detail::require_rank(input.shape(), 4, "global_avg_pool", "input");
  const std::size_t N = input.dim(0), C = input.dim(1), HW = input.dim(2) * input.dim(3);
  Tensor<T> out({N, C});
  const T* x = input.data().data();
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    T acc = 0;
    for (std::size_t i = 0; i < HW; ++i) acc += x[nc * HW + i];
    out[nc] = acc / T(HW);
  }
  if (Tape<T>::wants(tape, {&input})) {
    auto xi = input.handle(), yo = out.handle();
    tape->record("global_avg_pool", {xi}, yo, [xi, yo, N, C, HW] {
      xi->ensure_grad();
      for (std::size_t nc = 0; nc < N * C; ++nc) {
        const T g = yo->grad[nc] / T(HW);
        for (std::size_t i = 0; i < HW; ++i) xi->grad[nc * HW + i] += g;
      }
    });
  }
  return out;
}

template <class T>
struct SoftmaxXent {
  Tensor<T> loss;           // shape {1}: mean over the batch
  Tensor<T> probabilities;  // N x C
};

// Row-wise softmax with max subtraction; no gradient.
template <class T>
Tensor<T> softmax(const Tensor<T>& logits) {
  detail::require_rank(logits.shape(), 2, "softmax", "logits");
  const std::size_t N = logits.dim(0), C = logits.dim(1);
  Tensor<T> p({N, C});
  for (std::size_t n = 0; n < N; ++n) {
    const T* z = logits.data().data() + n * C;
    T* q = p.data().data() + n * C;
    const T m = *std::max_element(z, z + C);
    T sum = 0;
    for (std::size_t c = 0; c < C; ++c) sum += (q[c] = std::exp(z[c] - m));
    for (std::size_t c = 0; c < C; ++c) q[c] /= sum;
  }
  return p;
}

template <class T>
SoftmaxXent<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels,
                                     Tape<T>* tape = nullptr) {
  detail::require_rank(logits.shape(), 2, "softmax_cross_entropy", "logits");
  const std::size_t N = logits.dim(0), C = logits.dim(1);
  if (labels.size() != N) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                     " labels for batch of " + std::to_string(N));
  }
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= C) {
      throw ConfigError("softmax_cross_entropy: label " + std::to_string(l) +
                        " outside [0, " + std::to_string(C) + ")");
    }
  }
  Tensor<T> probs = softmax(logits);
  T total = 0;
  for (std::size_t n = 0; n < N; ++n) {
    const T* z = logits.data().data() + n * C;
    const T m = *std::max_element(z, z + C);
    T sum = 0;
    for (std::size_t c = 0; c < C; ++c) sum += std::exp(z[c] - m);
    // log-sum-exp form keeps the loss finite when p[label] underflows
    total += std::log(sum) + m - z[labels[n]];
  }
  Tensor<T> loss({1}, total / T(N));
  check_finite<T>(loss.data(), "softmax_cross_entropy");
  if (Tape<T>::wants(tape, {&logits})) {
    auto zi = logits.handle(), lo = loss.handle(), pr = probs.handle();
    std::vector<int> lab(labels.begin(), labels.end());
    tape->record("softmax_cross_entropy", {zi}, lo, [zi, lo, pr, lab = std::move(lab), N, C] {
      zi->ensure_grad();
      const T g = lo->grad[0] / T(N);
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) {
          const T onehot = static_cast<std::size_t>(lab[n]) == c ? T(1) : T(0);
          zi->grad[n * C + c] += g * (pr->data[n * C + c] - onehot);
        }
    });
  }
  return {loss, probs};
}

// Elementwise a + b (same shape).
template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape = nullptr) {
  if (a.shape() != b.shape()) {
    throw ShapeError("add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] + b[i];
  if (Tape<T>::wants(tape, {&a, &b})) {
    auto ai = a.handle(), bi = b.handle(), yo = out.handle();
    tape->record("add", {ai, bi}, yo, [ai, bi, yo] {
      for (auto* in : {ai.get(), bi.get()}) {
        if (!in->requires_grad) continue;
        in->ensure_grad();
        for (std::size_t i = 0; i < in->grad.size(); ++i) in->grad[i] += yo->grad[i];
      }
    });
  }
  return out;
}

// Elementwise c * a.
template <class T>
Tensor<T> scale(const Tensor<T>& a, T c, Tape<T>* tape = nullptr) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] * c;
  if (Tape<T>::wants(tape, {&a})) {
    auto ai = a.handle(), yo = out.handle();
    tape->record("scale", {ai}, yo, [ai, yo, c] {
      ai->ensure_grad();
      for (std::size_t i = 0; i < ai->grad.size(); ++i) ai->grad[i] += yo->grad[i] * c;
    });
  }
  return out;
}

// Scalar sum of all elements.
template <class T>
Tensor<T> sum(const Tensor<T>& a, Tape<T>* tape = nullptr) {
  T acc = 0;
  for (T v : a.data()) acc += v;
  Tensor<T> out({1}, acc);
  if (Tape<T>::wants(tape, {&a})) {
    auto ai = a.handle(), yo = out.handle();
    tape->record("sum", {ai}, yo, [ai, yo] {
      ai->ensure_grad();
      for (auto& g : ai->grad) g += yo->grad[0];
    });
  }
  return out;
}

// Scalar <a, weights> against a constant tensor; used to project a tensor
// output onto a scalar for gradient checks.
template <class T>
Tensor<T> dot_const(const Tensor<T>& a, const Tensor<T>& weights, Tape<T>* tape = nullptr) {
  if (a.numel() != weights.numel()) throw ShapeError("dot_const: size mismatch");
  T acc = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) acc += a[i] * weights[i];
  Tensor<T> out({1}, acc);
  if (Tape<T>::wants(tape, {&a})) {
    auto ai = a.handle(), wi = weights.handle(), yo = out.handle();
    tape->record("dot_const", {ai}, yo, [ai, wi, yo] {
      ai->ensure_grad();
      for (std::size_t i = 0; i < ai->grad.size(); ++i) ai->grad[i] += yo->grad[0] * wi->data[i];
    });
  }
  return out;
}

// Picks element `index` of a tensor as a scalar (e.g. one class logit).
template <class T>
Tensor<T> select(const Tensor<T>& a, std::size_t index, Tape<T>* tape = nullptr) {
  if (index >= a.numel()) throw ShapeError("select: index out of range");
  Tensor<T> out({1}, a[index]);
  if (Tape<T>::wants(tape, {&a})) {
    auto ai = a.handle(), yo = out.handle();
    tape->record("select", {ai}, yo, [ai, yo, index] {
      ai->ensure_grad();
      ai->grad[index] += yo->grad[0];
    });
  }
  return out;
}

}  // namespace glaucad
