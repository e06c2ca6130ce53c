#include "affseg/kernels/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include <Eigen/Core>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace affseg::kernels {

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

template <typename T>
void gemm(Trans ta, Trans tb, Index m, Index n, Index k, T alpha, const T* a, const T* b, T beta,
          T* c) {
  using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<RowMat> cm(c, m, n);
  if (k == 0) {
    if (beta == T(0)) cm.setZero();
    else cm *= beta;
    return;
  }
  Eigen::Map<const RowMat> am(a, ta == Trans::No ? m : k, ta == Trans::No ? k : m);
  Eigen::Map<const RowMat> bm(b, tb == Trans::No ? k : n, tb == Trans::No ? n : k);

  auto run = [&](const auto& lhs, const auto& rhs) {
    if (beta == T(0)) {
      cm.noalias() = alpha * (lhs * rhs);
    } else {
      if (beta != T(1)) cm *= beta;
      cm.noalias() += alpha * (lhs * rhs);
    }
  };
  if (ta == Trans::No && tb == Trans::No) run(am, bm);
  else if (ta == Trans::No) run(am, bm.transpose());
  else if (tb == Trans::No) run(am.transpose(), bm);
  else run(am.transpose(), bm.transpose());
}

namespace {

// Gathers every receptive field into one row: cols[P, kernel*kernel*Cin].
template <typename T>
void im2col(const ConvGeometry& g, const T* x, T* cols) {
  const Index pad = g.pad();
  const Index rows = g.batch * g.height;
  const Index patch = g.patch();
#pragma omp parallel for schedule(static)
  for (Index r = 0; r < rows; ++r) {
    const Index b = r / g.height;
    const Index oy = r % g.height;
    for (Index ox = 0; ox < g.width; ++ox) {
      T* dst = cols + ((r * g.width) + ox) * patch;
      for (Index ky = 0; ky < g.kernel; ++ky) {
        const Index sy = oy + ky * g.dilation - pad;
        for (Index kx = 0; kx < g.kernel; ++kx) {
          const Index sx = ox + kx * g.dilation - pad;
          T* tap = dst + (ky * g.kernel + kx) * g.in_channels;
          if (sy < 0 || sy >= g.height || sx < 0 || sx >= g.width) {
            std::fill(tap, tap + g.in_channels, T(0));
          } else {
            const T* src = x + ((b * g.height + sy) * g.width + sx) * g.in_channels;
            std::copy(src, src + g.in_channels, tap);
          }
        }
      }
    }
  }
}

// Inverse of im2col as a gather: each input pixel sums the column entries
// that read from it, so threads never write the same location.
template <typename T>
void col2im(const ConvGeometry& g, const T* cols, T* gx) {
  const Index pad = g.pad();
  const Index rows = g.batch * g.height;
  const Index patch = g.patch();
#pragma omp parallel for schedule(static)
  for (Index r = 0; r < rows; ++r) {
    const Index b = r / g.height;
    const Index iy = r % g.height;
    for (Index ix = 0; ix < g.width; ++ix) {
      T* dst = gx + ((r * g.width) + ix) * g.in_channels;
      std::fill(dst, dst + g.in_channels, T(0));
      for (Index ky = 0; ky < g.kernel; ++ky) {
        const Index oy = iy - ky * g.dilation + pad;
        if (oy < 0 || oy >= g.height) continue;
        for (Index kx = 0; kx < g.kernel; ++kx) {
          const Index ox = ix - kx * g.dilation + pad;
          if (ox < 0 || ox >= g.width) continue;
          const T* src = cols + ((b * g.height + oy) * g.width + ox) * patch +
                         (ky * g.kernel + kx) * g.in_channels;
          for (Index c = 0; c < g.in_channels; ++c) dst[c] += src[c];
        }
      }
    }
  }
}

template <typename T>
void add_bias_rows(Index rows, Index cols, const T* bias, T* y) {
#pragma omp parallel for schedule(static)
  for (Index r = 0; r < rows; ++r) {
    T* row = y + r * cols;
    for (Index c = 0; c < cols; ++c) row[c] += bias[c];
  }
}

template <typename T>
void accumulate_column_sums(Index rows, Index cols, const T* y, T* out) {
  for (Index r = 0; r < rows; ++r) {
    const T* row = y + r * cols;
    for (Index c = 0; c < cols; ++c) out[c] += row[c];
  }
}

}  // namespace

template <typename T>
void conv2d_forward(const ConvGeometry& g, const T* x, const T* w, const T* bias, T* y) {
  const Index pixels = g.pixels();
  if (g.kernel == 1) {
    gemm<T>(Trans::No, Trans::No, pixels, g.out_channels, g.in_channels, T(1), x, w, T(0), y);
  } else {
    std::vector<T> cols(static_cast<std::size_t>(pixels * g.patch()));
    im2col(g, x, cols.data());
    gemm<T>(Trans::No, Trans::No, pixels, g.out_channels, g.patch(), T(1), cols.data(), w, T(0), y);
  }
  if (bias) add_bias_rows(pixels, g.out_channels, bias, y);
}

template <typename T>
void conv2d_backward(const ConvGeometry& g, const T* x, const T* w, const T* gy, T* gx, T* gw,
                     T* gb) {
  const Index pixels = g.pixels();
  if (gb) accumulate_column_sums(pixels, g.out_channels, gy, gb);
  if (g.kernel == 1) {
    gemm<T>(Trans::Yes, Trans::No, g.in_channels, g.out_channels, pixels, T(1), x, gy, T(1), gw);
    if (gx)
      gemm<T>(Trans::No, Trans::Yes, pixels, g.in_channels, g.out_channels, T(1), gy, w, T(0), gx);
    return;
  }
  std::vector<T> cols(static_cast<std::size_t>(pixels * g.patch()));
  im2col(g, x, cols.data());
  gemm<T>(Trans::Yes, Trans::No, g.patch(), g.out_channels, pixels, T(1), cols.data(), gy, T(1), gw);
  if (gx) {
    gemm<T>(Trans::No, Trans::Yes, pixels, g.patch(), g.out_channels, T(1), gy, w, T(0),
            cols.data());
    col2im(g, cols.data(), gx);
  }
}

template <typename T>
void depthwise3x3_forward(Index batch, Index height, Index width, Index channels, const T* x,
                          const T* w, const T* bias, T* y) {
  const Index rows = batch * height;
#pragma omp parallel for schedule(static)
  for (Index r = 0; r < rows; ++r) {
    const Index b = r / height;
    const Index oy = r % height;
    for (Index ox = 0; ox < width; ++ox) {
      T* dst = y + (r * width + ox) * channels;
      if (bias) std::copy(bias, bias + channels, dst);
      else std::fill(dst, dst + channels, T(0));
      for (Index ky = 0; ky < 3; ++ky) {
        const Index sy = oy + ky - 1;
        if (sy < 0 || sy >= height) continue;
        for (Index kx = 0; kx < 3; ++kx) {
          const Index sx = ox + kx - 1;
          if (sx < 0 || sx >= width) continue;
          const T* src = x + ((b * height + sy) * width + sx) * channels;
          const T* wt = w + (ky * 3 + kx) * channels;
          for (Index c = 0; c < channels; ++c) dst[c] += src[c] * wt[c];
        }
      }
    }
  }
}

template <typename T>
void depthwise3x3_backward(Index batch, Index height, Index width, Index channels, const T* x,
                           const T* w, const T* gy, T* gx, T* gw, T* gb) {
  const Index rows = batch * height;
  if (gb) accumulate_column_sums(rows * width, channels, gy, gb);
  if (gx) {
#pragma omp parallel for schedule(static)
    for (Index r = 0; r < rows; ++r) {
      const Index b = r / height;
      const Index iy = r % height;
      for (Index ix = 0; ix < width; ++ix) {
        T* dst = gx + (r * width + ix) * channels;
        std::fill(dst, dst + channels, T(0));
        for (Index ky = 0; ky < 3; ++ky) {
          const Index oy = iy - ky + 1;
          if (oy < 0 || oy >= height) continue;
          for (Index kx = 0; kx < 3; ++kx) {
            const Index ox = ix - kx + 1;
            if (ox < 0 || ox >= width) continue;
            const T* src = gy + ((b * height + oy) * width + ox) * channels;
            const T* wt = w + (ky * 3 + kx) * channels;
            for (Index c = 0; c < channels; ++c) dst[c] += src[c] * wt[c];
          }
        }
      }
    }
  }
  // One tap per thread; each tap owns a disjoint slice of gw.
#pragma omp parallel for schedule(static)
  for (Index tap = 0; tap < 9; ++tap) {
    const Index ky = tap / 3;
    const Index kx = tap % 3;
    T* acc = gw + tap * channels;
    for (Index r = 0; r < rows; ++r) {
      const Index b = r / height;
      const Index oy = r % height;
      const Index sy = oy + ky - 1;
      if (sy < 0 || sy >= height) continue;
      for (Index ox = 0; ox < width; ++ox) {
        const Index sx = ox + kx - 1;
        if (sx < 0 || sx >= width) continue;
        const T* g = gy + (r * width + ox) * channels;
        const T* src = x + ((b * height + sy) * width + sx) * channels;
        for (Index c = 0; c < channels; ++c) acc[c] += g[c] * src[c];
      }
    }
  }
}

template <typename T>
void window_attention_forward(const AttentionGeometry& g, const T* q, const T* k, const T* v,
                              const T* bias, const T* mask, T scale, T* probs, T* out) {
  const Index n = g.tokens;
  const Index d = g.head_dim;
  const Index problems = g.windows * g.heads;
#pragma omp parallel for schedule(static)
  for (Index p = 0; p < problems; ++p) {
    const Index w = p / g.heads;
    const Index h = p % g.heads;
    const T* qp = q + p * n * d;
    const T* kp = k + p * n * d;
    const T* vp = v + p * n * d;
    T* pp = probs + p * n * n;
    T* op = out + p * n * d;
    const T* bp = bias ? bias + h * n * n : nullptr;
    const T* mp = mask ? mask + (w % g.mask_windows) * n * n : nullptr;
    for (Index i = 0; i < n; ++i) {
      T* row = pp + i * n;
      T row_max = -std::numeric_limits<T>::infinity();
      for (Index j = 0; j < n; ++j) {
        T s = 0;
        for (Index e = 0; e < d; ++e) s += qp[i * d + e] * kp[j * d + e];
        s *= scale;
        if (bp) s += bp[i * n + j];
        if (mp) s += mp[i * n + j];
        row[j] = s;
        row_max = std::max(row_max, s);
      }
      T sum = 0;
      for (Index j = 0; j < n; ++j) {
        row[j] = std::exp(row[j] - row_max);
        sum += row[j];
      }
      const T inv = T(1) / sum;
      for (Index j = 0; j < n; ++j) row[j] *= inv;
      T* orow = op + i * d;
      std::fill(orow, orow + d, T(0));
      for (Index j = 0; j < n; ++j) {
        const T pij = row[j];
        const T* vrow = vp + j * d;
        for (Index e = 0; e < d; ++e) orow[e] += pij * vrow[e];
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
  const Index problems = g.windows * g.heads;
  std::vector<T> dscore(static_cast<std::size_t>(problems * n * n));
#pragma omp parallel for schedule(static)
  for (Index p = 0; p < problems; ++p) {
    const T* qp = q + p * n * d;
    const T* kp = k + p * n * d;
    const T* vp = v + p * n * d;
    const T* pp = probs + p * n * n;
    const T* go = gout + p * n * d;
    T* ds = dscore.data() + p * n * n;
    T* gqp = gq + p * n * d;
    T* gkp = gk + p * n * d;
    T* gvp = gv + p * n * d;
    std::fill(gvp, gvp + n * d, T(0));
    for (Index i = 0; i < n; ++i) {
      const T* prow = pp + i * n;
      const T* grow = go + i * d;
      T dot = 0;
      for (Index j = 0; j < n; ++j) {
        T dp = 0;
        const T* vrow = vp + j * d;
        for (Index e = 0; e < d; ++e) dp += grow[e] * vrow[e];
        ds[i * n + j] = dp;
        dot += prow[j] * dp;
        T* gvrow = gvp + j * d;
        for (Index e = 0; e < d; ++e) gvrow[e] += prow[j] * grow[e];
      }
      for (Index j = 0; j < n; ++j) ds[i * n + j] = prow[j] * (ds[i * n + j] - dot);
    }
    for (Index i = 0; i < n; ++i) {
      T* gqrow = gqp + i * d;
      std::fill(gqrow, gqrow + d, T(0));
      for (Index j = 0; j < n; ++j) {
        const T s = ds[i * n + j] * scale;
        const T* krow = kp + j * d;
        for (Index e = 0; e < d; ++e) gqrow[e] += s * krow[e];
      }
    }
    std::fill(gkp, gkp + n * d, T(0));
    for (Index i = 0; i < n; ++i) {
      const T* qrow = qp + i * d;
      for (Index j = 0; j < n; ++j) {
        const T s = ds[i * n + j] * scale;
        T* gkrow = gkp + j * d;
        for (Index e = 0; e < d; ++e) gkrow[e] += s * qrow[e];
      }
    }
  }
  if (!gbias) return;
  // Reduce over windows in a fixed order so the result is thread-count independent.
  const Index per_head = n * n;
#pragma omp parallel for schedule(static)
  for (Index hij = 0; hij < g.heads * per_head; ++hij) {
    const Index h = hij / per_head;
    const Index ij = hij % per_head;
    T acc = 0;
    for (Index w = 0; w < g.windows; ++w) acc += dscore[static_cast<std::size_t>((w * g.heads + h) * per_head + ij)];
    gbias[hij] += acc;
  }
}

template <typename T>
void layer_norm_forward(Index rows, Index cols, const T* x, const T* gamma, const T* beta, T eps,
                        T* y, T* xhat, T* rstd) {
#pragma omp parallel for schedule(static)
  for (Index r = 0; r < rows; ++r) {
    const T* xr = x + r * cols;
    T mean = 0;
    for (Index c = 0; c < cols; ++c) mean += xr[c];
    mean /= static_cast<T>(cols);
    T var = 0;
    for (Index c = 0; c < cols; ++c) var += (xr[c] - mean) * (xr[c] - mean);
    var /= static_cast<T>(cols);
    const T rs = T(1) / std::sqrt(var + eps);
    rstd[r] = rs;
    T* hr = xhat + r * cols;
    T* yr = y + r * cols;
    for (Index c = 0; c < cols; ++c) {
      hr[c] = (xr[c] - mean) * rs;
      yr[c] = hr[c] * gamma[c] + beta[c];
    }
  }
}

template <typename T>
void layer_norm_backward(Index rows, Index cols, const T* xhat, const T* rstd, const T* gamma,
                         const T* gy, T* gx, T* ggamma, T* gbeta) {
#pragma omp parallel for schedule(static)
  for (Index r = 0; r < rows; ++r) {
    const T* hr = xhat + r * cols;
    const T* gr = gy + r * cols;
    T mean_g = 0;
    T mean_gh = 0;
    for (Index c = 0; c < cols; ++c) {
      const T gt = gr[c] * gamma[c];
      mean_g += gt;
      mean_gh += gt * hr[c];
    }
    mean_g /= static_cast<T>(cols);
    mean_gh /= static_cast<T>(cols);
    T* out = gx + r * cols;
    for (Index c = 0; c < cols; ++c)
      out[c] = rstd[r] * (gr[c] * gamma[c] - mean_g - hr[c] * mean_gh);
  }
  for (Index r = 0; r < rows; ++r) {
    const T* hr = xhat + r * cols;
    const T* gr = gy + r * cols;
    for (Index c = 0; c < cols; ++c) {
      ggamma[c] += gr[c] * hr[c];
      gbeta[c] += gr[c];
    }
  }
}

#define AFFSEG_INSTANTIATE_KERNELS(T)                                                            \
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

AFFSEG_INSTANTIATE_KERNELS(float)
AFFSEG_INSTANTIATE_KERNELS(double)

}  // namespace affseg::kernels
