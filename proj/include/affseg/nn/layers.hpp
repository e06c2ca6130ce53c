#pragma once

// Parameterized building blocks with explicit forward/backward passes.
//
// forward() is const and writes whatever the backward pass needs into an
// optional Cache; pass nullptr for inference. backward() consumes that cache,
// accumulates into the parameters' grad tensors, and returns the gradient
// with respect to the layer input.

#include <cmath>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "affseg/tensor.hpp"

namespace affseg::nn {

using Rng = std::mt19937_64;

template <typename T>
struct Parameter {
  Tensor<T> value;
  Tensor<T> grad;

  Parameter() = default;
  explicit Parameter(Shape shape) : value(shape), grad(std::move(shape)) {}
  void zero_grad() { grad.fill(T(0)); }
};

template <typename T>
using ParamRefs = std::vector<std::pair<std::string, Parameter<T>*>>;

// Truncated at two standard deviations.
template <typename T>
void init_trunc_normal(Tensor<T>& t, double stddev, Rng& rng);
// He-style normal with variance 2 / fan_in.
template <typename T>
void init_fan_in_normal(Tensor<T>& t, Index fan_in, Rng& rng);

enum class Init { TruncNormal, FanIn };

/// y = x W + b over the last dimension. W is stored [in, out].
/// Init::FanIn is for layers that act as 1x1 convolutions.
template <typename T>
class Linear {
 public:
  struct Cache {
    Tensor<T> input;
  };

  Linear() = default;
  Linear(Index in, Index out, bool bias, Rng& rng, Init init = Init::TruncNormal);

  Tensor<T> forward(const Tensor<T>& x, Cache* cache) const;
  Tensor<T> backward(const Cache& cache, const Tensor<T>& gy);

  void collect_params(const std::string& prefix, ParamRefs<T>& out);
  Index in_features() const { return in_; }
  Index out_features() const { return out_; }
  Parameter<T>& weight() { return weight_; }
  Parameter<T>& bias() { return bias_; }
  bool has_bias() const { return has_bias_; }

 private:
  Index in_ = 0;
  Index out_ = 0;
  bool has_bias_ = true;
  Parameter<T> weight_;
  Parameter<T> bias_;
};

/// Normalizes over the last dimension; eps 1e-5.
template <typename T>
class LayerNorm {
 public:
  struct Cache {
    Tensor<T> xhat;
    Tensor<T> rstd;
  };

  LayerNorm() = default;
  explicit LayerNorm(Index dim, T eps = T(1e-5));

  Tensor<T> forward(const Tensor<T>& x, Cache* cache) const;
  Tensor<T> backward(const Cache& cache, const Tensor<T>& gy);
  void collect_params(const std::string& prefix, ParamRefs<T>& out);
  Parameter<T>& gamma() { return gamma_; }
  Parameter<T>& beta() { return beta_; }

 private:
  Index dim_ = 0;
  T eps_ = T(1e-5);
  Parameter<T> gamma_;
  Parameter<T> beta_;
};

/// Square stride-1 convolution, "same" zero padding, NHWC.
/// Weight layout [kernel, kernel, in, out].
template <typename T>
class Conv2d {
 public:
  struct Cache {
    Tensor<T> input;
  };

  Conv2d() = default;
  Conv2d(Index in, Index out, Index kernel, Index dilation, Rng& rng);

  Tensor<T> forward(const Tensor<T>& x, Cache* cache) const;
  Tensor<T> backward(const Cache& cache, const Tensor<T>& gy);
  void collect_params(const std::string& prefix, ParamRefs<T>& out);
  Parameter<T>& weight() { return weight_; }
  Parameter<T>& bias() { return bias_; }
  Index dilation() const { return dilation_; }

 private:
  Index in_ = 0;
  Index out_ = 0;
  Index kernel_ = 1;
  Index dilation_ = 1;
  Parameter<T> weight_;
  Parameter<T> bias_;
};

/// Per-channel 3x3 convolution. Weight [3, 3, C].
template <typename T>
class DepthwiseConv3x3 {
 public:
  struct Cache {
    Tensor<T> input;
  };

  DepthwiseConv3x3() = default;
  DepthwiseConv3x3(Index channels, Rng& rng);

  Tensor<T> forward(const Tensor<T>& x, Cache* cache) const;
  Tensor<T> backward(const Cache& cache, const Tensor<T>& gy);
  void collect_params(const std::string& prefix, ParamRefs<T>& out);
  Parameter<T>& weight() { return weight_; }
  Parameter<T>& bias() { return bias_; }
  Index channels() const { return channels_; }

 private:
  Index channels_ = 0;
  Parameter<T> weight_;
  Parameter<T> bias_;
};

/// Transposed convolution with kernel 2 and stride 2: every input pixel
/// writes one 2x2 output block. Weight [in, 2, 2, out].
template <typename T>
class ConvTranspose2x2 {
 public:
  struct Cache {
    Tensor<T> input;
  };

  ConvTranspose2x2() = default;
  ConvTranspose2x2(Index in, Index out, Rng& rng);

  Tensor<T> forward(const Tensor<T>& x, Cache* cache) const;
  Tensor<T> backward(const Cache& cache, const Tensor<T>& gy);
  void collect_params(const std::string& prefix, ParamRefs<T>& out);
  Parameter<T>& weight() { return weight_; }
  Parameter<T>& bias() { return bias_; }

 private:
  Index in_ = 0;
  Index out_ = 0;
  Parameter<T> weight_;
  Parameter<T> bias_;
};

// Stateless activations. The backward functions take the forward input
// (or output, for sigmoid) and the upstream gradient.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x);
template <typename T>
Tensor<T> gelu_backward(const Tensor<T>& x, const Tensor<T>& gy);
template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope);
template <typename T>
Tensor<T> leaky_relu_backward(const Tensor<T>& x, const Tensor<T>& gy, T slope);
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);
template <typename T>
Tensor<T> sigmoid_backward(const Tensor<T>& y, const Tensor<T>& gy);

template <typename T>
T sigmoid(T x) {
  return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}

/// Elementwise helpers used across modules.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
void require_finite(const Tensor<T>& t, const std::string& what);

/// Concatenates two NHWC maps along channels, and its inverse split.
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>& x, Index first);

template <typename T>
Index parameter_count(const ParamRefs<T>& params) {
  Index n = 0;
  for (const auto& [name, p] : params) n += p->value.size();
  return n;
}

}  // namespace affseg::nn
