#include "affseg/window_attention.hpp"

#include <cmath>

#include "affseg/kernels/kernels.hpp"

namespace affseg {

template <typename T>
Tensor<T> window_partition(const Tensor<T>& x, Index window) {
  x.require_rank(4, "window_partition");
  const Index b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  if (window < 1 || h % window != 0 || w % window != 0)
    throw ShapeError("window_partition: window " + std::to_string(window) + " does not tile " +
                     std::to_string(h) + "x" + std::to_string(w));
  const Index nh = h / window, nw = w / window;
  Tensor<T> out({b * nh * nw, window, window, c});
  for (Index n = 0; n < b; ++n)
    for (Index ty = 0; ty < nh; ++ty)
      for (Index tx = 0; tx < nw; ++tx) {
        const Index win = (n * nh + ty) * nw + tx;
        for (Index r = 0; r < window; ++r) {
          const T* src = x.data() + ((n * h + ty * window + r) * w + tx * window) * c;
          std::copy(src, src + window * c, out.data() + (win * window + r) * window * c);
        }
      }
  return out;
}

template <typename T>
Tensor<T> window_reverse(const Tensor<T>& windows, Index window, Index height, Index width) {
  windows.require_rank(4, "window_reverse");
  if (window < 1 || height % window != 0 || width % window != 0 || windows.dim(1) != window ||
      windows.dim(2) != window)
    throw ShapeError("window_reverse: windows " + to_string(windows.shape()) +
                     " inconsistent with window " + std::to_string(window) + " over " +
                     std::to_string(height) + "x" + std::to_string(width));
  const Index nh = height / window, nw = width / window;
  if (windows.dim(0) % (nh * nw) != 0)
    throw ShapeError("window_reverse: " + std::to_string(windows.dim(0)) +
                     " windows is not a multiple of " + std::to_string(nh * nw));
  const Index b = windows.dim(0) / (nh * nw);
  const Index c = windows.dim(3);
  Tensor<T> out({b, height, width, c});
  for (Index n = 0; n < b; ++n)
    for (Index ty = 0; ty < nh; ++ty)
      for (Index tx = 0; tx < nw; ++tx) {
        const Index win = (n * nh + ty) * nw + tx;
        for (Index r = 0; r < window; ++r) {
          const T* src = windows.data() + (win * window + r) * window * c;
          std::copy(src, src + window * c,
                    out.data() + ((n * height + ty * window + r) * width + tx * window) * c);
        }
      }
  return out;
}

template <typename T>
Tensor<T> cyclic_shift(const Tensor<T>& x, Index dy, Index dx) {
  x.require_rank(4, "cyclic_shift");
  const Index b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  if (dy == 0 && dx == 0) return x;
  auto wrap = [](Index v, Index n) { return ((v % n) + n) % n; };
  Tensor<T> out(x.shape());
  for (Index n = 0; n < b; ++n)
    for (Index i = 0; i < h; ++i) {
      const Index si = wrap(i - dy, h);
      for (Index j = 0; j < w; ++j) {
        const Index sj = wrap(j - dx, w);
        const T* src = x.data() + ((n * h + si) * w + sj) * c;
        std::copy(src, src + c, out.data() + ((n * h + i) * w + j) * c);
      }
    }
  return out;
}

Tensor<int> relative_position_index(Index window) {
  const Index n = window * window;
  const Index span = 2 * window - 1;
  Tensor<int> index({n, n});
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < n; ++j) {
      const Index dh = i / window - j / window;
      const Index dw = i % window - j % window;
      index.at(i, j) = static_cast<int>((dh + window - 1) * span + (dw + window - 1));
    }
  return index;
}

template <typename T>
Tensor<T> build_attention_mask(Index height, Index width, Index window, Index shift) {
  if (window < 1 || height % window != 0 || width % window != 0)
    throw ShapeError("build_attention_mask: window does not tile the grid");
  const Index n = window * window;
  const Index windows = (height / window) * (width / window);
  Tensor<T> mask({windows, n, n});
  if (shift == 0) return mask;

  // Label the rolled grid with 3 x 3 band regions, then compare labels
  // inside each window.
  auto band = [&](Index v, Index extent) -> int {
    if (v < extent - window) return 0;
    if (v < extent - shift) return 1;
    return 2;
  };
  Tensor<int> region({1, height, width, 1});
  for (Index i = 0; i < height; ++i)
    for (Index j = 0; j < width; ++j) region.at(0, i, j, 0) = band(i, height) * 3 + band(j, width);
  const Tensor<int> labels = window_partition(region, window);
  const T neg = static_cast<T>(kMaskNeg);
  for (Index w = 0; w < windows; ++w)
    for (Index q = 0; q < n; ++q)
      for (Index k = 0; k < n; ++k)
        mask.at(w, q, k) = labels[w * n + q] == labels[w * n + k] ? T(0) : neg;
  return mask;
}

template <typename T>
RelativePositionBias<T>::RelativePositionBias(Index window_, Index heads_)
    : window(window_),
      heads(heads_),
      table({(2 * window_ - 1) * (2 * window_ - 1), heads_}),
      index(relative_position_index(window_)) {}

template <typename T>
RelativePositionBias<T>::RelativePositionBias(Index window_, Index heads_, nn::Rng& rng)
    : RelativePositionBias(window_, heads_) {
  nn::init_trunc_normal(table.value, 0.02, rng);
}

template <typename T>
Tensor<T> RelativePositionBias<T>::expand() const {
  const Index n = window * window;
  Tensor<T> out({heads, n, n});
  for (Index h = 0; h < heads; ++h)
    for (Index ij = 0; ij < n * n; ++ij) out[h * n * n + ij] = table.value[index[ij] * heads + h];
  return out;
}

template <typename T>
void RelativePositionBias<T>::accumulate_grad(const Tensor<T>& gbias) {
  const Index n = window * window;
  gbias.require_shape({heads, n, n}, "RelativePositionBias::accumulate_grad");
  for (Index h = 0; h < heads; ++h)
    for (Index ij = 0; ij < n * n; ++ij) table.grad[index[ij] * heads + h] += gbias[h * n * n + ij];
}

namespace {

template <typename T>
kernels::AttentionGeometry attention_geometry(const Tensor<T>& q, const Tensor<T>& k,
                                              const Tensor<T>& v,
                                              const RelativePositionBias<T>& bias,
                                              const Tensor<T>* mask) {
  q.require_rank(4, "window_attention q");
  k.require_shape(q.shape(), "window_attention k");
  v.require_shape(q.shape(), "window_attention v");
  kernels::AttentionGeometry g{q.dim(0), q.dim(1), q.dim(2), q.dim(3), 1};
  if (bias.heads != g.heads || bias.window * bias.window != g.tokens)
    throw ShapeError("window_attention: bias table for window " + std::to_string(bias.window) +
                     " x " + std::to_string(bias.heads) + " heads does not match q " +
                     to_string(q.shape()));
  if (mask) {
    mask->require_rank(3, "window_attention mask");
    if (mask->dim(1) != g.tokens || mask->dim(2) != g.tokens || mask->dim(0) < 1 ||
        g.windows % mask->dim(0) != 0)
      throw ShapeError("window_attention: mask " + to_string(mask->shape()) +
                       " incompatible with q " + to_string(q.shape()));
    g.mask_windows = mask->dim(0);
  }
  return g;
}

}  // namespace

template <typename T>
Tensor<T> window_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                           const RelativePositionBias<T>& bias, const Tensor<T>* mask,
                           AttentionCache<T>* cache) {
  const auto g = attention_geometry(q, k, v, bias, mask);
  nn::require_finite(q, "window_attention q");
  nn::require_finite(k, "window_attention k");
  nn::require_finite(v, "window_attention v");
  const Tensor<T> expanded = bias.expand();
  Tensor<T> probs({g.windows, g.heads, g.tokens, g.tokens});
  Tensor<T> out(q.shape());
  const T scale = T(1) / std::sqrt(static_cast<T>(g.head_dim));
  kernels::window_attention_forward<T>(g, q.data(), k.data(), v.data(), expanded.data(),
                                       mask ? mask->data() : nullptr, scale, probs.data(),
                                       out.data());
  if (cache) {
    cache->q = q;
    cache->k = k;
    cache->v = v;
    cache->probs = std::move(probs);
  }
  return out;
}

template <typename T>
AttentionGrads<T> window_attention_backward(const AttentionCache<T>& cache, const Tensor<T>& gout,
                                            RelativePositionBias<T>& bias) {
  const auto g = attention_geometry<T>(cache.q, cache.k, cache.v, bias, nullptr);
  gout.require_shape(cache.q.shape(), "window_attention_backward");
  AttentionGrads<T> grads{Tensor<T>(cache.q.shape()), Tensor<T>(cache.q.shape()),
                          Tensor<T>(cache.q.shape())};
  Tensor<T> gbias({g.heads, g.tokens, g.tokens});
  const T scale = T(1) / std::sqrt(static_cast<T>(g.head_dim));
  kernels::window_attention_backward<T>(g, cache.q.data(), cache.k.data(), cache.v.data(),
                                        cache.probs.data(), gout.data(), scale, grads.q.data(),
                                        grads.k.data(), grads.v.data(), gbias.data());
  bias.accumulate_grad(gbias);
  return grads;
}

// ------------------------------------------------------- WindowAttention

template <typename T>
WindowAttention<T>::WindowAttention(Index dim, Index heads, Index window, Index shift,
                                    Index height, Index width, nn::Rng& rng)
    : dim_(dim),
      heads_(heads),
      window_(window),
      shift_(shift),
      height_(height),
      width_(width),
      qkv_(dim, 3 * dim, true, rng),
      proj_(dim, dim, true, rng),
      bias_(window, heads, rng) {
  if (dim % heads != 0) throw ShapeError("WindowAttention: dim not divisible by heads");
  if (shift > 0) mask_ = build_attention_mask<T>(height, width, window, shift);
}

namespace {

// rows [windows * N, 3C] with per-row layout (qkv, head, d) -> three [windows, heads, N, d]
template <typename T>
void split_heads(const Tensor<T>& qkv, Index windows, Index heads, Index tokens, Index head_dim,
                 Tensor<T>& q, Tensor<T>& k, Tensor<T>& v) {
  const Shape shape{windows, heads, tokens, head_dim};
  q = Tensor<T>(shape);
  k = Tensor<T>(shape);
  v = Tensor<T>(shape);
  Tensor<T>* parts[3] = {&q, &k, &v};
  const Index dim = heads * head_dim;
#pragma omp parallel for schedule(static)
  for (Index w = 0; w < windows; ++w)
    for (Index t = 0; t < tokens; ++t) {
      const T* row = qkv.data() + (w * tokens + t) * 3 * dim;
      for (Index part = 0; part < 3; ++part)
        for (Index h = 0; h < heads; ++h)
          std::copy(row + part * dim + h * head_dim, row + part * dim + (h + 1) * head_dim,
                    parts[part]->data() + ((w * heads + h) * tokens + t) * head_dim);
    }
}

template <typename T>
Tensor<T> merge_heads(const Tensor<T>& x) {
  const Index windows = x.dim(0), heads = x.dim(1), tokens = x.dim(2), head_dim = x.dim(3);
  Tensor<T> out({windows * tokens, heads * head_dim});
#pragma omp parallel for schedule(static)
  for (Index w = 0; w < windows; ++w)
    for (Index h = 0; h < heads; ++h)
      for (Index t = 0; t < tokens; ++t) {
        const T* src = x.data() + ((w * heads + h) * tokens + t) * head_dim;
        std::copy(src, src + head_dim, out.data() + (w * tokens + t) * heads * head_dim + h * head_dim);
      }
  return out;
}

template <typename T>
Tensor<T> unmerge_heads(const Tensor<T>& rows, Index windows, Index heads, Index tokens,
                        Index head_dim) {
  Tensor<T> out({windows, heads, tokens, head_dim});
#pragma omp parallel for schedule(static)
  for (Index w = 0; w < windows; ++w)
    for (Index h = 0; h < heads; ++h)
      for (Index t = 0; t < tokens; ++t) {
        const T* src = rows.data() + (w * tokens + t) * heads * head_dim + h * head_dim;
        std::copy(src, src + head_dim, out.data() + ((w * heads + h) * tokens + t) * head_dim);
      }
  return out;
}

}  // namespace

template <typename T>
Tensor<T> WindowAttention<T>::forward(const Tensor<T>& x, Cache* cache) const {
  x.require_rank(4, "WindowAttention");
  if (x.dim(1) != height_ || x.dim(2) != width_ || x.dim(3) != dim_)
    throw ShapeError("WindowAttention: expected [B, " + std::to_string(height_) + ", " +
                     std::to_string(width_) + ", " + std::to_string(dim_) + "], got " +
                     to_string(x.shape()));
  const Index tokens = window_ * window_;
  const Index head_dim = dim_ / heads_;
  Tensor<T> windows = window_partition(shift_ ? cyclic_shift(x, -shift_, -shift_) : x, window_);
  const Index count = windows.dim(0);
  windows.reshape({count * tokens, dim_});

  Tensor<T> qkv = qkv_.forward(windows, cache ? &cache->qkv : nullptr);
  Tensor<T> q, k, v;
  split_heads(qkv, count, heads_, tokens, head_dim, q, k, v);
  Tensor<T> attn = window_attention(q, k, v, bias_, mask_ ? &*mask_ : nullptr,
                                    cache ? &cache->attn : nullptr);
  Tensor<T> out = proj_.forward(merge_heads(attn), cache ? &cache->proj : nullptr);
  out.reshape({count, window_, window_, dim_});
  Tensor<T> merged = window_reverse(out, window_, height_, width_);
  return shift_ ? cyclic_shift(merged, shift_, shift_) : merged;
}

template <typename T>
Tensor<T> WindowAttention<T>::backward(const Cache& cache, const Tensor<T>& gy) {
  const Index tokens = window_ * window_;
  const Index head_dim = dim_ / heads_;
  Tensor<T> gwin = window_partition(shift_ ? cyclic_shift(gy, -shift_, -shift_) : gy, window_);
  const Index count = gwin.dim(0);
  gwin.reshape({count * tokens, dim_});

  Tensor<T> gattn_rows = proj_.backward(cache.proj, gwin);
  Tensor<T> gattn = unmerge_heads(gattn_rows, count, heads_, tokens, head_dim);
  AttentionGrads<T> g = window_attention_backward(cache.attn, gattn, bias_);

  Tensor<T> gqkv({count * tokens, 3 * dim_});
  const Tensor<T>* parts[3] = {&g.q, &g.k, &g.v};
#pragma omp parallel for schedule(static)
  for (Index w = 0; w < count; ++w)
    for (Index t = 0; t < tokens; ++t) {
      T* row = gqkv.data() + (w * tokens + t) * 3 * dim_;
      for (Index part = 0; part < 3; ++part)
        for (Index h = 0; h < heads_; ++h) {
          const T* src = parts[part]->data() + ((w * heads_ + h) * tokens + t) * head_dim;
          std::copy(src, src + head_dim, row + part * dim_ + h * head_dim);
        }
    }
  Tensor<T> gx = qkv_.backward(cache.qkv, gqkv);
  gx.reshape({count, window_, window_, dim_});
  Tensor<T> merged = window_reverse(gx, window_, height_, width_);
  return shift_ ? cyclic_shift(merged, shift_, shift_) : merged;
}

template <typename T>
void WindowAttention<T>::collect_params(const std::string& prefix, nn::ParamRefs<T>& out) {
  qkv_.collect_params(prefix + ".qkv", out);
  out.emplace_back(prefix + ".relative_position_bias", &bias_.table);
  proj_.collect_params(prefix + ".proj", out);
}

#define AFFSEG_INSTANTIATE_WINDOW(T)                                                             \
  template Tensor<T> window_partition<T>(const Tensor<T>&, Index);                               \
  template Tensor<T> window_reverse<T>(const Tensor<T>&, Index, Index, Index);                   \
  template Tensor<T> cyclic_shift<T>(const Tensor<T>&, Index, Index);                            \
  template Tensor<T> build_attention_mask<T>(Index, Index, Index, Index);                        \
  template struct RelativePositionBias<T>;                                                       \
  template Tensor<T> window_attention<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,   \
                                         const RelativePositionBias<T>&, const Tensor<T>*,       \
                                         AttentionCache<T>*);                                    \
  template AttentionGrads<T> window_attention_backward<T>(const AttentionCache<T>&,              \
                                                          const Tensor<T>&,                      \
                                                          RelativePositionBias<T>&);             \
  template class WindowAttention<T>;

AFFSEG_INSTANTIATE_WINDOW(float)
AFFSEG_INSTANTIATE_WINDOW(double)
template Tensor<int> window_partition<int>(const Tensor<int>&, Index);
template Tensor<int> window_reverse<int>(const Tensor<int>&, Index, Index, Index);
template Tensor<int> cyclic_shift<int>(const Tensor<int>&, Index, Index);

}  // namespace affseg
