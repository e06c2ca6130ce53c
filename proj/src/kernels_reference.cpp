// Serial reference kernels. Direct loops, no im2col, no BLAS.

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "affseg/kernels/kernels.hpp"

namespace affseg::kernels::reference {

template <typename T>
void gemm(Trans ta, Trans tb, Index m, Index n, Index k, T alpha, const T* a, const T* b, T beta,
          T* c) {
  for (Index i = 0; i < m; ++i) {
    for (Index j = 0; j < n; ++j) {
      T acc = 0;
      for (Index p = 0; p < k; ++p) {
        const T av = ta == Trans::No ? a[i * k + p] : a[p * m + i];
        const T bv = tb == Trans::No ? b[p * n + j] : b[j * k + p];
        acc += av * bv;
      }
      c[i * n + j] = alpha * acc + (beta == T(0) ? T(0) : beta * c[i * n + j]);
    }
  }
}

template <typename T>
void conv2d_forward(const ConvGeometry& g, const T* x, const T* w, const T* bias, T* y) {
  const Index pad = g.pad();
  for (Index b = 0; b < g.batch; ++b)
    for (Index oy = 0; oy < g.height; ++oy)
      for (Index ox = 0; ox < g.width; ++ox)
        for (Index co = 0; co < g.out_channels; ++co) {
          T acc = bias ? bias[co] : T(0);
          for (Index ky = 0; ky < g.kernel; ++ky)
            for (Index kx = 0; kx < g.kernel; ++kx) {
              const Index sy = oy + ky * g.dilation - pad;
              const Index sx = ox + kx * g.dilation - pad;
              if (sy < 0 || sy >= g.height || sx < 0 || sx >= g.width) continue;
              for (Index ci = 0; ci < g.in_channels; ++ci)
                acc += x[((b * g.height + sy) * g.width + sx) * g.in_channels + ci] *
                       w[((ky * g.kernel + kx) * g.in_channels + ci) * g.out_channels + co];
            }
          y[((b * g.height + oy) * g.width + ox) * g.out_channels + co] = acc;
        }
}

template <typename T>
void conv2d_backward(const ConvGeometry& g, const T* x, const T* w, const T* gy, T* gx, T* gw,
                     T* gb) {
  const Index pad = g.pad();
  if (gx) std::fill(gx, gx + g.pixels() * g.in_channels, T(0));
  for (Index b = 0; b < g.batch; ++b)
    for (Index oy = 0; oy < g.height; ++oy)
      for (Index ox = 0; ox < g.width; ++ox)
        for (Index co = 0; co < g.out_channels; ++co) {
          const T gv = gy[((b * g.height + oy) * g.width + ox) * g.out_channels + co];
          if (gb) gb[co] += gv;
          for (Index ky = 0; ky < g.kernel; ++ky)
            for (Index kx = 0; kx < g.kernel; ++kx) {
              const Index sy = oy + ky * g.dilation - pad;
              const Index sx = ox + kx * g.dilation - pad;
              if (sy < 0 || sy >= g.height || sx < 0 || sx >= g.width) continue;
              for (Index ci = 0; ci < g.in_channels; ++ci) {
                const Index xi = ((b * g.height + sy) * g.width + sx) * g.in_channels + ci;
                const Index wi = ((ky * g.kernel + kx) * g.in_channels + ci) * g.out_channels + co;
                gw[wi] += gv * x[xi];
                if (gx) gx[xi] += gv * w[wi];
              }
            }
        }
}

template <typename T>
void depthwise3x3_forward(Index batch, Index height, Index width, Index channels, const T* x,
                          const T* w, const T* bias, T* y) {
  for (Index b = 0; b < batch; ++b)
    for (Index oy = 0; oy < height; ++oy)
      for (Index ox = 0; ox < width; ++ox)
        for (Index c = 0; c < channels; ++c) {
          T acc = bias ? bias[c] : T(0);
          for (Index ky = 0; ky < 3; ++ky)
            for (Index kx = 0; kx < 3; ++kx) {
              const Index sy = oy + ky - 1;
              const Index sx = ox + kx - 1;
              if (sy < 0 || sy >= height || sx < 0 || sx >= width) continue;
              acc += x[((b * height + sy) * width + sx) * channels + c] * w[(ky * 3 + kx) * channels + c];
            }
          y[((b * height + oy) * width + ox) * channels + c] = acc;
        }
}

template <typename T>
void depthwise3x3_backward(Index batch, Index height, Index width, Index channels, const T* x,
                           const T* w, const T* gy, T* gx, T* gw, T* gb) {
  if (gx) std::fill(gx, gx + batch * height * width * channels, T(0));
  for (Index b = 0; b < batch; ++b)
    for (Index oy = 0; oy < height; ++oy)
      for (Index ox = 0; ox < width; ++ox)
        for (Index c = 0; c < channels; ++c) {
          const T gv = gy[((b * height + oy) * width + ox) * channels + c];
          if (gb) gb[c] += gv;
          for (Index ky = 0; ky < 3; ++ky)
            for (Index kx = 0; kx < 3; ++kx) {
              const Index sy = oy + ky - 1;
              const Index sx = ox + kx - 1;
              if (sy < 0 || sy >= height || sx < 0 || sx >= width) continue;
              const Index xi = ((b * height + sy) * width + sx) * channels + c;
              const Index wi = (ky * 3 + kx) * channels + c;
              gw[wi] += gv * x[xi];
              if (gx) gx[xi] += gv * w[wi];
            }
        }
}

template <typename T>
void window_attention_forward(const AttentionGeometry& g, const T* q, const T* k, const T* v,
                              const T* bias, const T* mask, T scale, T* probs, T* out) {
  const Index n = g.tokens;
  const Index d = g.head_dim;
  for (Index w = 0; w < g.windows; ++w)
    for (Index h = 0; h < g.heads; ++h) {
      const Index p = w * g.heads + h;
      for (Index i = 0; i < n; ++i) {
        std::vector<T> logits(static_cast<std::size_t>(n));
        for (Index j = 0; j < n; ++j) {
          T s = 0;
          for (Index e = 0; e < d; ++e) s += q[(p * n + i) * d + e] * k[(p * n + j) * d + e];
          s *= scale;
          if (bias) s += bias[(h * n + i) * n + j];
          if (mask) s += mask[((w % g.mask_windows) * n + i) * n + j];
          logits[static_cast<std::size_t>(j)] = s;
        }
        const T mx = *std::max_element(logits.begin(), logits.end());
        T sum = 0;
        for (T& s : logits) sum += (s = std::exp(s - mx));
        for (Index j = 0; j < n; ++j) probs[(p * n + i) * n + j] = logits[static_cast<std::size_t>(j)] / sum;
        for (Index e = 0; e < d; ++e) {
          T acc = 0;
          for (Index j = 0; j < n; ++j) acc += probs[(p * n + i) * n + j] * v[(p * n + j) * d + e];
          out[(p * n + i) * d + e] = acc;
        }
      }
    }
}

template <typename T>
void window_attention_backward(const AttentionGeometry& g, const T* q, const T* k, const T* v,
                               const T* probs, const T* gout, T scale, T* gq, T* gk, T* gv,
                               T* gbias) {
  const Index n = g.tokens;
  const Index d = g.head_dim;
  const Index total = g.windows * g.heads * n * d;
  std::fill(gq, gq + total, T(0));
  std::fill(gk, gk + total, T(0));
  std::fill(gv, gv + total, T(0));
  for (Index w = 0; w < g.windows; ++w)
    for (Index h = 0; h < g.heads; ++h) {
      const Index p = w * g.heads + h;
      for (Index i = 0; i < n; ++i) {
        std::vector<T> dp(static_cast<std::size_t>(n));
        for (Index j = 0; j < n; ++j) {
          T acc = 0;
          for (Index e = 0; e < d; ++e) acc += gout[(p * n + i) * d + e] * v[(p * n + j) * d + e];
          dp[static_cast<std::size_t>(j)] = acc;
          for (Index e = 0; e < d; ++e)
            gv[(p * n + j) * d + e] += probs[(p * n + i) * n + j] * gout[(p * n + i) * d + e];
        }
        for (Index j = 0; j < n; ++j) {
          // d softmax_j / d logit_l = P_j (delta_jl - P_l)
          T ds = 0;
          for (Index l = 0; l < n; ++l) {
            const T pl = probs[(p * n + i) * n + l];
            const T pj = probs[(p * n + i) * n + j];
            ds += dp[static_cast<std::size_t>(l)] * pl * ((l == j ? T(1) : T(0)) - pj);
          }
          if (gbias) gbias[(h * n + i) * n + j] += ds;
          for (Index e = 0; e < d; ++e) {
            gq[(p * n + i) * d + e] += scale * ds * k[(p * n + j) * d + e];
            gk[(p * n + j) * d + e] += scale * ds * q[(p * n + i) * d + e];
          }
        }
      }
    }
}

template <typename T>
void layer_norm_forward(Index rows, Index cols, const T* x, const T* gamma, const T* beta, T eps,
                        T* y, T* xhat, T* rstd) {
  for (Index r = 0; r < rows; ++r) {
    T mean = 0;
    for (Index c = 0; c < cols; ++c) mean += x[r * cols + c];
    mean /= static_cast<T>(cols);
    T var = 0;
    for (Index c = 0; c < cols; ++c) var += (x[r * cols + c] - mean) * (x[r * cols + c] - mean);
    var /= static_cast<T>(cols);
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (Index c = 0; c < cols; ++c) {
      xhat[r * cols + c] = (x[r * cols + c] - mean) * rstd[r];
      y[r * cols + c] = xhat[r * cols + c] * gamma[c] + beta[c];
    }
  }
}

template <typename T>
void layer_norm_backward(Index rows, Index cols, const T* xhat, const T* rstd, const T* gamma,
                         const T* gy, T* gx, T* ggamma, T* gbeta) {
  for (Index r = 0; r < rows; ++r) {
    // Full Jacobian: d xhat_c / d x_j = rstd (delta_cj - 1/n - xhat_c xhat_j / n)
    for (Index j = 0; j < cols; ++j) {
      T acc = 0;
      for (Index c = 0; c < cols; ++c) {
        const T jac = rstd[r] * ((c == j ? T(1) : T(0)) - T(1) / static_cast<T>(cols) -
                                 xhat[r * cols + c] * xhat[r * cols + j] / static_cast<T>(cols));
        acc += gy[r * cols + c] * gamma[c] * jac;
      }
      gx[r * cols + j] = acc;
    }
    for (Index c = 0; c < cols; ++c) {
      ggamma[c] += gy[r * cols + c] * xhat[r * cols + c];
      gbeta[c] += gy[r * cols + c];
    }
  }
}

#define AFFSEG_INSTANTIATE_REFERENCE(T)                                                          \
  template void gemm<T>(Trans, Trans, Index, Index, Index, T, const T*, const T*, T, T*);        \
  template void conv2d_forward<T>(const ConvGeometry&, const T*, const T*, const T*, T*);        \
  template void conv2d_backward<T>(const ConvGeometry&, const T*, const T*, const T*, T*, T*,    \
                                   T*);                                                          \
  template void depthwise3x3_forward<T>(Index, Index, Index, Index, const T*, const T*,          \
                                        const T*, T*);                                           \
  template void depthwise3x3_backward<T>(Index, Index, Index, Index, const T*, const T*,         \
                                         const T*, T*, T*, T*);                                  \
  template void window_attention_forward<T>(const AttentionGeometry&, const T*, const T*,        \
                                            const T*, const T*, const T*, T, T*, T*);            \
  template void window_attention_backward<T>(const AttentionGeometry&, const T*, const T*,       \
                                             const T*, const T*, const T*, T, T*, T*, T*, T*);   \
  template void layer_norm_forward<T>(Index, Index, const T*, const T*, const T*, T, T*, T*,     \
                                      T*);                                                       \
  template void layer_norm_backward<T>(Index, Index, const T*, const T*, const T*, const T*, T*, \
                                       T*, T*);

AFFSEG_INSTANTIATE_REFERENCE(float)
AFFSEG_INSTANTIATE_REFERENCE(double)

}  // namespace affseg::kernels::reference
