#pragma once

#include <array>

#include "affseg/nn/layers.hpp"
#include "affseg/window_attention.hpp"

namespace affseg {

/// Token-wise feed-forward network of a transformer block.
///
/// Enhanced (EFFN): expand -> depthwise 3x3 -> GELU -> pointwise 1x1 -> GELU
/// -> project, with the convolutions running on the H x W token grid.
/// Plain (ablated): expand -> GELU -> project.
///
/// Accepts [B, L, C] with L = H * W, or [B, H, W, C]; the output has the
/// input's shape.
template <typename T>
class FeedForward {
 public:
  struct Cache {
    typename nn::Linear<T>::Cache expand;
    typename nn::DepthwiseConv3x3<T>::Cache dw;
    Tensor<T> dw_out;
    typename nn::Linear<T>::Cache pw;
    Tensor<T> pw_out;
    typename nn::Linear<T>::Cache project;
  };

  FeedForward() = default;
  FeedForward(Index dim, Index hidden, bool enhanced, Index height, Index width, nn::Rng& rng);

  Tensor<T> forward(const Tensor<T>& x, Cache* cache) const;
  Tensor<T> backward(const Cache& cache, const Tensor<T>& gy);
  void collect_params(const std::string& prefix, nn::ParamRefs<T>& out);

  bool enhanced() const { return enhanced_; }
  nn::Linear<T>& expand() { return expand_; }
  nn::DepthwiseConv3x3<T>& depthwise() { return dw_; }
  nn::Linear<T>& pointwise() { return pw_; }
  nn::Linear<T>& project() { return project_; }

 private:
  Shape grid_shape(const Tensor<T>& x) const;

  Index dim_ = 0;
  Index hidden_ = 0;
  bool enhanced_ = true;
  Index height_ = 0;
  Index width_ = 0;
  nn::Linear<T> expand_;
  nn::DepthwiseConv3x3<T> dw_;
  nn::Linear<T> pw_;
  nn::Linear<T> project_;
};

/// One pre-norm transformer block: x + Attn(LN(x)), then + FFN(LN(.)).
template <typename T>
class TransformerBlock {
 public:
  struct Cache {
    typename nn::LayerNorm<T>::Cache norm1;
    typename WindowAttention<T>::Cache attn;
    typename nn::LayerNorm<T>::Cache norm2;
    typename FeedForward<T>::Cache ffn;
  };

  TransformerBlock() = default;
  TransformerBlock(Index dim, Index heads, Index window, Index shift, Index height, Index width,
                   Index hidden, bool effn, nn::Rng& rng);

  /// x: [B, H, W, C]
  Tensor<T> forward(const Tensor<T>& x, Cache* cache) const;
  Tensor<T> backward(const Cache& cache, const Tensor<T>& gy);
  void collect_params(const std::string& prefix, nn::ParamRefs<T>& out);

  WindowAttention<T>& attention() { return attn_; }
  FeedForward<T>& ffn() { return ffn_; }

 private:
  nn::LayerNorm<T> norm1_;
  WindowAttention<T> attn_;
  nn::LayerNorm<T> norm2_;
  FeedForward<T> ffn_;
};

/// Regular-window block followed by a shifted-window block.
/// `shift` is the second block's cyclic shift (normally window / 2).
template <typename T>
class MwaBlockPair {
 public:
  struct Cache {
    std::array<typename TransformerBlock<T>::Cache, 2> blocks;
  };

  MwaBlockPair() = default;
  MwaBlockPair(Index dim, Index heads, Index window, Index shift, Index height, Index width,
               Index hidden, bool effn, nn::Rng& rng);

  Tensor<T> forward(const Tensor<T>& x, Cache* cache) const;
  Tensor<T> backward(const Cache& cache, const Tensor<T>& gy);
  void collect_params(const std::string& prefix, nn::ParamRefs<T>& out);

  TransformerBlock<T>& regular() { return blocks_[0]; }
  TransformerBlock<T>& shifted() { return blocks_[1]; }

 private:
  std::array<TransformerBlock<T>, 2> blocks_;
};

}  // namespace affseg
