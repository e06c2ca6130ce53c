#include "affseg/nn/layers.hpp"

#include <cmath>

#include "affseg/kernels/kernels.hpp"

namespace affseg::nn {

using kernels::Trans;

template <typename T>
void init_trunc_normal(Tensor<T>& t, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  for (Index i = 0; i < t.size(); ++i) {
    double z = dist(rng);
    while (std::abs(z) > 2.0) z = dist(rng);
    t[i] = static_cast<T>(z * stddev);
  }
}

template <typename T>
void init_fan_in_normal(Tensor<T>& t, Index fan_in, Rng& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<T>(dist(rng));
}

namespace {

Index leading_rows(const Shape& shape, Index last, const char* what) {
  if (shape.empty() || shape.back() != last)
    throw ShapeError(std::string(what) + ": last dimension must be " + std::to_string(last) +
                     ", got shape " + to_string(shape));
  return numel_of(shape) / last;
}

void require_nhwc(const Shape& shape, Index channels, const char* what) {
  if (shape.size() != 4 || shape[3] != channels)
    throw ShapeError(std::string(what) + ": expected [B, H, W, " + std::to_string(channels) +
                     "], got " + to_string(shape));
}

template <typename T>
void column_sums(Index rows, Index cols, const T* src, T* out) {
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c) out[c] += src[r * cols + c];
}

}  // namespace

// ---------------------------------------------------------------- Linear

template <typename T>
Linear<T>::Linear(Index in, Index out, bool bias, Rng& rng, Init init)
    : in_(in), out_(out), has_bias_(bias), weight_({in, out}), bias_({bias ? out : 0}) {
  if (init == Init::FanIn) init_fan_in_normal(weight_.value, in, rng);
  else init_trunc_normal(weight_.value, 0.02, rng);
}

template <typename T>
Tensor<T> Linear<T>::forward(const Tensor<T>& x, Cache* cache) const {
  const Index rows = leading_rows(x.shape(), in_, "Linear");
  Shape out_shape = x.shape();
  out_shape.back() = out_;
  Tensor<T> y(out_shape);
  kernels::gemm<T>(Trans::No, Trans::No, rows, out_, in_, T(1), x.data(), weight_.value.data(),
                   T(0), y.data());
  if (has_bias_) {
    const T* b = bias_.value.data();
#pragma omp parallel for schedule(static)
    for (Index r = 0; r < rows; ++r)
      for (Index c = 0; c < out_; ++c) y[r * out_ + c] += b[c];
  }
  if (cache) cache->input = x;
  return y;
}

template <typename T>
Tensor<T> Linear<T>::backward(const Cache& cache, const Tensor<T>& gy) {
  const Index rows = leading_rows(gy.shape(), out_, "Linear backward");
  kernels::gemm<T>(Trans::Yes, Trans::No, in_, out_, rows, T(1), cache.input.data(), gy.data(), T(1),
                   weight_.grad.data());
  if (has_bias_) column_sums(rows, out_, gy.data(), bias_.grad.data());
  Tensor<T> gx(cache.input.shape());
  kernels::gemm<T>(Trans::No, Trans::Yes, rows, in_, out_, T(1), gy.data(), weight_.value.data(), T(0),
                   gx.data());
  return gx;
}

template <typename T>
void Linear<T>::collect_params(const std::string& prefix, ParamRefs<T>& out) {
  out.emplace_back(prefix + ".weight", &weight_);
  if (has_bias_) out.emplace_back(prefix + ".bias", &bias_);
}

// ------------------------------------------------------------- LayerNorm

template <typename T>
LayerNorm<T>::LayerNorm(Index dim, T eps) : dim_(dim), eps_(eps), gamma_({dim}), beta_({dim}) {
  gamma_.value.fill(T(1));
}

template <typename T>
Tensor<T> LayerNorm<T>::forward(const Tensor<T>& x, Cache* cache) const {
  const Index rows = leading_rows(x.shape(), dim_, "LayerNorm");
  Tensor<T> y(x.shape());
  Tensor<T> xhat(x.shape());
  Tensor<T> rstd({rows});
  kernels::layer_norm_forward<T>(rows, dim_, x.data(), gamma_.value.data(), beta_.value.data(), eps_,
                                 y.data(), xhat.data(), rstd.data());
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->rstd = std::move(rstd);
  }
  return y;
}

template <typename T>
Tensor<T> LayerNorm<T>::backward(const Cache& cache, const Tensor<T>& gy) {
  const Index rows = leading_rows(gy.shape(), dim_, "LayerNorm backward");
  Tensor<T> gx(gy.shape());
  kernels::layer_norm_backward<T>(rows, dim_, cache.xhat.data(), cache.rstd.data(),
                                  gamma_.value.data(), gy.data(), gx.data(), gamma_.grad.data(),
                                  beta_.grad.data());
  return gx;
}

template <typename T>
void LayerNorm<T>::collect_params(const std::string& prefix, ParamRefs<T>& out) {
  out.emplace_back(prefix + ".gamma", &gamma_);
  out.emplace_back(prefix + ".beta", &beta_);
}

// ---------------------------------------------------------------- Conv2d

template <typename T>
Conv2d<T>::Conv2d(Index in, Index out, Index kernel, Index dilation, Rng& rng)
    : in_(in),
      out_(out),
      kernel_(kernel),
      dilation_(dilation),
      weight_({kernel, kernel, in, out}),
      bias_({out}) {
  init_fan_in_normal(weight_.value, kernel * kernel * in, rng);
}

template <typename T>
Tensor<T> Conv2d<T>::forward(const Tensor<T>& x, Cache* cache) const {
  require_nhwc(x.shape(), in_, "Conv2d");
  kernels::ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), in_, out_, kernel_, dilation_};
  Tensor<T> y({g.batch, g.height, g.width, out_});
  kernels::conv2d_forward<T>(g, x.data(), weight_.value.data(), bias_.value.data(), y.data());
  if (cache) cache->input = x;
  return y;
}

template <typename T>
Tensor<T> Conv2d<T>::backward(const Cache& cache, const Tensor<T>& gy) {
  const Tensor<T>& x = cache.input;
  kernels::ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), in_, out_, kernel_, dilation_};
  gy.require_shape({g.batch, g.height, g.width, out_}, "Conv2d backward");
  Tensor<T> gx(x.shape());
  kernels::conv2d_backward<T>(g, x.data(), weight_.value.data(), gy.data(), gx.data(),
                              weight_.grad.data(), bias_.grad.data());
  return gx;
}

template <typename T>
void Conv2d<T>::collect_params(const std::string& prefix, ParamRefs<T>& out) {
  out.emplace_back(prefix + ".weight", &weight_);
  out.emplace_back(prefix + ".bias", &bias_);
}

// ------------------------------------------------------ DepthwiseConv3x3

template <typename T>
DepthwiseConv3x3<T>::DepthwiseConv3x3(Index channels, Rng& rng)
    : channels_(channels), weight_({3, 3, channels}), bias_({channels}) {
  init_fan_in_normal(weight_.value, 9, rng);
}

template <typename T>
Tensor<T> DepthwiseConv3x3<T>::forward(const Tensor<T>& x, Cache* cache) const {
  require_nhwc(x.shape(), channels_, "DepthwiseConv3x3");
  Tensor<T> y(x.shape());
  kernels::depthwise3x3_forward<T>(x.dim(0), x.dim(1), x.dim(2), channels_, x.data(),
                                   weight_.value.data(), bias_.value.data(), y.data());
  if (cache) cache->input = x;
  return y;
}

template <typename T>
Tensor<T> DepthwiseConv3x3<T>::backward(const Cache& cache, const Tensor<T>& gy) {
  const Tensor<T>& x = cache.input;
  gy.require_shape(x.shape(), "DepthwiseConv3x3 backward");
  Tensor<T> gx(x.shape());
  kernels::depthwise3x3_backward<T>(x.dim(0), x.dim(1), x.dim(2), channels_, x.data(),
                                    weight_.value.data(), gy.data(), gx.data(),
                                    weight_.grad.data(), bias_.grad.data());
  return gx;
}

template <typename T>
void DepthwiseConv3x3<T>::collect_params(const std::string& prefix, ParamRefs<T>& out) {
  out.emplace_back(prefix + ".weight", &weight_);
  out.emplace_back(prefix + ".bias", &bias_);
}

// ------------------------------------------------------ ConvTranspose2x2

template <typename T>
ConvTranspose2x2<T>::ConvTranspose2x2(Index in, Index out, Rng& rng)
    : in_(in), out_(out), weight_({in, 2, 2, out}), bias_({out}) {
  init_fan_in_normal(weight_.value, in, rng);
}

template <typename T>
Tensor<T> ConvTranspose2x2<T>::forward(const Tensor<T>& x, Cache* cache) const {
  require_nhwc(x.shape(), in_, "ConvTranspose2x2");
  const Index b = x.dim(0), h = x.dim(1), w = x.dim(2);
  const Index pixels = b * h * w;
  std::vector<T> blocks(static_cast<std::size_t>(pixels * 4 * out_));
  kernels::gemm<T>(Trans::No, Trans::No, pixels, 4 * out_, in_, T(1), x.data(),
                   weight_.value.data(), T(0), blocks.data());
  Tensor<T> y({b, 2 * h, 2 * w, out_});
  const T* bias = bias_.value.data();
#pragma omp parallel for schedule(static)
  for (Index p = 0; p < pixels; ++p) {
    const Index n = p / (h * w);
    const Index i = (p / w) % h;
    const Index j = p % w;
    for (Index di = 0; di < 2; ++di)
      for (Index dj = 0; dj < 2; ++dj) {
        const T* src = blocks.data() + (p * 4 + di * 2 + dj) * out_;
        T* dst = y.data() + ((n * 2 * h + 2 * i + di) * 2 * w + 2 * j + dj) * out_;
        for (Index c = 0; c < out_; ++c) dst[c] = src[c] + bias[c];
      }
  }
  if (cache) cache->input = x;
  return y;
}

template <typename T>
Tensor<T> ConvTranspose2x2<T>::backward(const Cache& cache, const Tensor<T>& gy) {
  const Tensor<T>& x = cache.input;
  const Index b = x.dim(0), h = x.dim(1), w = x.dim(2);
  gy.require_shape({b, 2 * h, 2 * w, out_}, "ConvTranspose2x2 backward");
  const Index pixels = b * h * w;
  std::vector<T> gblocks(static_cast<std::size_t>(pixels * 4 * out_));
#pragma omp parallel for schedule(static)
  for (Index p = 0; p < pixels; ++p) {
    const Index n = p / (h * w);
    const Index i = (p / w) % h;
    const Index j = p % w;
    for (Index di = 0; di < 2; ++di)
      for (Index dj = 0; dj < 2; ++dj) {
        const T* src = gy.data() + ((n * 2 * h + 2 * i + di) * 2 * w + 2 * j + dj) * out_;
        std::copy(src, src + out_, gblocks.data() + (p * 4 + di * 2 + dj) * out_);
      }
  }
  column_sums(gy.size() / out_, out_, gy.data(), bias_.grad.data());
  kernels::gemm<T>(Trans::Yes, Trans::No, in_, 4 * out_, pixels, T(1), x.data(), gblocks.data(), T(1),
                   weight_.grad.data());
  Tensor<T> gx(x.shape());
  kernels::gemm<T>(Trans::No, Trans::Yes, pixels, in_, 4 * out_, T(1), gblocks.data(),
                   weight_.value.data(), T(0), gx.data());
  return gx;
}

template <typename T>
void ConvTranspose2x2<T>::collect_params(const std::string& prefix, ParamRefs<T>& out) {
  out.emplace_back(prefix + ".weight", &weight_);
  out.emplace_back(prefix + ".bias", &bias_);
}

// ----------------------------------------------------------- activations

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  const T inv_sqrt2 = T(1) / std::sqrt(T(2));
#pragma omp parallel for schedule(static)
  for (Index i = 0; i < x.size(); ++i) y[i] = T(0.5) * x[i] * (T(1) + std::erf(x[i] * inv_sqrt2));
  return y;
}

template <typename T>
Tensor<T> gelu_backward(const Tensor<T>& x, const Tensor<T>& gy) {
  Tensor<T> gx(x.shape());
  const T inv_sqrt2 = T(1) / std::sqrt(T(2));
  const T inv_sqrt2pi = T(1) / std::sqrt(T(2) * T(M_PI));
#pragma omp parallel for schedule(static)
  for (Index i = 0; i < x.size(); ++i) {
    const T cdf = T(0.5) * (T(1) + std::erf(x[i] * inv_sqrt2));
    const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * x[i] * x[i]);
    gx[i] = gy[i] * (cdf + x[i] * pdf);
  }
  return gx;
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope) {
  Tensor<T> y(x.shape());
  for (Index i = 0; i < x.size(); ++i) y[i] = x[i] >= T(0) ? x[i] : slope * x[i];
  return y;
}

template <typename T>
Tensor<T> leaky_relu_backward(const Tensor<T>& x, const Tensor<T>& gy, T slope) {
  Tensor<T> gx(x.shape());
  for (Index i = 0; i < x.size(); ++i) gx[i] = x[i] >= T(0) ? gy[i] : slope * gy[i];
  return gx;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (Index i = 0; i < x.size(); ++i) y[i] = sigmoid(x[i]);
  return y;
}

template <typename T>
Tensor<T> sigmoid_backward(const Tensor<T>& y, const Tensor<T>& gy) {
  Tensor<T> gx(y.shape());
  for (Index i = 0; i < y.size(); ++i) gx[i] = gy[i] * y[i] * (T(1) - y[i]);
  return gx;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T> out = a;
  out += b;
  return out;
}

template <typename T>
void require_finite(const Tensor<T>& t, const std::string& what) {
  for (Index i = 0; i < t.size(); ++i)
    if (!std::isfinite(t[i])) throw NumericError(what + ": non-finite value at index " + std::to_string(i));
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  a.require_rank(4, "concat_channels");
  if (b.rank() != 4 || a.dim(0) != b.dim(0) || a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2))
    throw ShapeError("concat_channels: spatial mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  const Index ca = a.dim(3), cb = b.dim(3);
  const Index pixels = a.size() / ca;
  Tensor<T> out({a.dim(0), a.dim(1), a.dim(2), ca + cb});
  for (Index p = 0; p < pixels; ++p) {
    std::copy(a.data() + p * ca, a.data() + (p + 1) * ca, out.data() + p * (ca + cb));
    std::copy(b.data() + p * cb, b.data() + (p + 1) * cb, out.data() + p * (ca + cb) + ca);
  }
  return out;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>& x, Index first) {
  x.require_rank(4, "split_channels");
  const Index c = x.dim(3);
  const Index second = c - first;
  const Index pixels = x.size() / c;
  Tensor<T> a({x.dim(0), x.dim(1), x.dim(2), first});
  Tensor<T> b({x.dim(0), x.dim(1), x.dim(2), second});
  for (Index p = 0; p < pixels; ++p) {
    std::copy(x.data() + p * c, x.data() + p * c + first, a.data() + p * first);
    std::copy(x.data() + p * c + first, x.data() + (p + 1) * c, b.data() + p * second);
  }
  return {std::move(a), std::move(b)};
}

#define AFFSEG_INSTANTIATE_LAYERS(T)                                                        \
  template void init_trunc_normal<T>(Tensor<T>&, double, Rng&);                             \
  template void init_fan_in_normal<T>(Tensor<T>&, Index, Rng&);                             \
  template class Linear<T>;                                                                 \
  template class LayerNorm<T>;                                                              \
  template class Conv2d<T>;                                                                 \
  template class DepthwiseConv3x3<T>;                                                       \
  template class ConvTranspose2x2<T>;                                                       \
  template Tensor<T> gelu<T>(const Tensor<T>&);                                             \
  template Tensor<T> gelu_backward<T>(const Tensor<T>&, const Tensor<T>&);                  \
  template Tensor<T> leaky_relu<T>(const Tensor<T>&, T);                                    \
  template Tensor<T> leaky_relu_backward<T>(const Tensor<T>&, const Tensor<T>&, T);         \
  template Tensor<T> sigmoid<T>(const Tensor<T>&);                                          \
  template Tensor<T> sigmoid_backward<T>(const Tensor<T>&, const Tensor<T>&);               \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                            \
  template void require_finite<T>(const Tensor<T>&, const std::string&);                    \
  template Tensor<T> concat_channels<T>(const Tensor<T>&, const Tensor<T>&);                \
  template std::pair<Tensor<T>, Tensor<T>> split_channels<T>(const Tensor<T>&, Index);

AFFSEG_INSTANTIATE_LAYERS(float)
AFFSEG_INSTANTIATE_LAYERS(double)

}  // namespace affseg::nn
