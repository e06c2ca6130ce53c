#pragma once

// Window machinery for (shifted) window self-attention: tiling, cyclic
// shift, the region mask for shifted windows, the relative position bias
// table, and the attention kernel with its backward pass.

#include <optional>

#include "affseg/nn/layers.hpp"
#include "affseg/tensor.hpp"

namespace affseg {

/// Logit offset for token pairs that come from different pre-shift regions.
inline constexpr double kMaskNeg = -100.0;

/// [B, H, W, C] -> [B * nW, M, M, C], windows in row-major tile order.
template <typename T>
Tensor<T> window_partition(const Tensor<T>& x, Index window);

/// [B * nW, M, M, C] -> [B, H, W, C]; exact inverse of window_partition.
template <typename T>
Tensor<T> window_reverse(const Tensor<T>& windows, Index window, Index height, Index width);

/// Torus roll: out[b, i, j, c] = x[b, (i - dy) mod H, (j - dx) mod W, c].
template <typename T>
Tensor<T> cyclic_shift(const Tensor<T>& x, Index dy, Index dx);

/// index[i][j] = (dh + M - 1) * (2M - 1) + (dw + M - 1) for flattened window
/// positions i, j with (dh, dw) = pos(i) - pos(j). Shape [M^2, M^2].
Tensor<int> relative_position_index(Index window);

/// Region mask for attention inside shifted windows, shape [nW, M^2, M^2].
/// Entry (q, k) is 0 when both tokens come from the same pre-shift region
/// and kMaskNeg otherwise. shift == 0 yields all zeros.
template <typename T>
Tensor<T> build_attention_mask(Index height, Index width, Index window, Index shift);

/// Learned bias table B-hat, one column per head, plus the fixed index map.
template <typename T>
struct RelativePositionBias {
  Index window = 1;
  Index heads = 1;
  nn::Parameter<T> table;  // [(2M-1)^2, heads]
  Tensor<int> index;       // [M^2, M^2]

  RelativePositionBias() = default;
  RelativePositionBias(Index window, Index heads);
  RelativePositionBias(Index window, Index heads, nn::Rng& rng);

  /// B[h][i][j] = table[index[i][j]][h], shape [heads, M^2, M^2].
  Tensor<T> expand() const;
  /// Scatters d/dB back into table.grad.
  void accumulate_grad(const Tensor<T>& gbias);
};

template <typename T>
struct AttentionCache {
  Tensor<T> q, k, v;
  Tensor<T> probs;
};

template <typename T>
struct AttentionGrads {
  Tensor<T> q, k, v;
};

/// softmax(Q K^T / sqrt(d) + B + mask) V per window and head.
///
/// q, k, v: [windows, heads, M^2, d]. mask: [nW, M^2, M^2]; window w reads
/// mask slice w % nW, so a batch of images can share one mask.
template <typename T>
Tensor<T> window_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                           const RelativePositionBias<T>& bias, const Tensor<T>* mask,
                           AttentionCache<T>* cache);

/// Returns dq, dk, dv; adds the table gradient into bias.table.grad.
template <typename T>
AttentionGrads<T> window_attention_backward(const AttentionCache<T>& cache, const Tensor<T>& gout,
                                            RelativePositionBias<T>& bias);

/// W-MSA (shift 0) or SW-MSA (shift > 0) over a fixed H x W token grid:
/// roll, partition, qkv projection, windowed attention, output projection,
/// reverse, roll back.
template <typename T>
class WindowAttention {
 public:
  struct Cache {
    typename nn::Linear<T>::Cache qkv;
    AttentionCache<T> attn;
    typename nn::Linear<T>::Cache proj;
  };

  WindowAttention() = default;
  WindowAttention(Index dim, Index heads, Index window, Index shift, Index height, Index width,
                  nn::Rng& rng);

  /// x: [B, H, W, C] -> [B, H, W, C]
  Tensor<T> forward(const Tensor<T>& x, Cache* cache) const;
  Tensor<T> backward(const Cache& cache, const Tensor<T>& gy);
  void collect_params(const std::string& prefix, nn::ParamRefs<T>& out);

  Index shift() const { return shift_; }
  nn::Linear<T>& qkv() { return qkv_; }
  nn::Linear<T>& proj() { return proj_; }
  RelativePositionBias<T>& bias() { return bias_; }
  const std::optional<Tensor<T>>& mask() const { return mask_; }

 private:
  Index dim_ = 0;
  Index heads_ = 1;
  Index window_ = 1;
  Index shift_ = 0;
  Index height_ = 0;
  Index width_ = 0;
  nn::Linear<T> qkv_;
  nn::Linear<T> proj_;
  RelativePositionBias<T> bias_;
  std::optional<Tensor<T>> mask_;
};

}  // namespace affseg
