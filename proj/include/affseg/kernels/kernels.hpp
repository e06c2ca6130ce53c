#pragma once

// Compute kernels behind the network layers.
//
// Every kernel exists twice with identical signatures: the OpenMP-parallel
// version in affseg::kernels (GEMM delegated to Eigen) and a plain serial
// loop version in affseg::kernels::reference. Tests check the two against
// each other and bench/ compares their throughput.
//
// All buffers are row-major and contiguous. Feature maps are NHWC.

#include "affseg/tensor.hpp"

namespace affseg::kernels {

enum class Trans { No, Yes };

/// C = alpha * op(A) * op(B) + beta * C, with op(A) of size m x k and
/// op(B) of size k x n. A is stored m x k (or k x m when transposed).
template <typename T>
void gemm(Trans ta, Trans tb, Index m, Index n, Index k, T alpha, const T* a, const T* b, T beta,
          T* c);

/// Stride-1 square convolution with "same" zero padding.
struct ConvGeometry {
  Index batch = 1;
  Index height = 1;
  Index width = 1;
  Index in_channels = 1;
  Index out_channels = 1;
  Index kernel = 1;
  Index dilation = 1;

  Index pad() const { return dilation * (kernel - 1) / 2; }
  Index pixels() const { return batch * height * width; }
  Index patch() const { return kernel * kernel * in_channels; }
};

// weight layout [kernel, kernel, in_channels, out_channels]; bias may be null.
template <typename T>
void conv2d_forward(const ConvGeometry& g, const T* x, const T* w, const T* bias, T* y);

// gx is overwritten (may be null); gw and gb are accumulated into (gb may be null).
template <typename T>
void conv2d_backward(const ConvGeometry& g, const T* x, const T* w, const T* gy, T* gx, T* gw,
                     T* gb);

// Depthwise 3x3, zero padded, one filter per channel. weight [3, 3, C].
template <typename T>
void depthwise3x3_forward(Index batch, Index height, Index width, Index channels, const T* x,
                          const T* w, const T* bias, T* y);

template <typename T>
void depthwise3x3_backward(Index batch, Index height, Index width, Index channels, const T* x,
                           const T* w, const T* gy, T* gx, T* gw, T* gb);

/// Shape of a batch of windowed attention problems.
///
/// q, k, v, out: [windows, heads, tokens, head_dim]
/// bias:         [heads, tokens, tokens] (already gathered from the table)
/// mask:         [mask_windows, tokens, tokens] or null; window w uses
///               mask slice w % mask_windows
/// probs:        [windows, heads, tokens, tokens]
struct AttentionGeometry {
  Index windows = 1;
  Index heads = 1;
  Index tokens = 1;
  Index head_dim = 1;
  Index mask_windows = 1;
};

template <typename T>
void window_attention_forward(const AttentionGeometry& g, const T* q, const T* k, const T* v,
                              const T* bias, const T* mask, T scale, T* probs, T* out);

// gq, gk, gv overwritten; gbias [heads, tokens, tokens] accumulated (may be null).
template <typename T>
void window_attention_backward(const AttentionGeometry& g, const T* q, const T* k, const T* v,
                               const T* probs, const T* gout, T scale, T* gq, T* gk, T* gv,
                               T* gbias);

/// Row-wise layer normalization over the last dimension.
/// xhat and rstd are written for reuse by the backward pass.
template <typename T>
void layer_norm_forward(Index rows, Index cols, const T* x, const T* gamma, const T* beta, T eps,
                        T* y, T* xhat, T* rstd);

template <typename T>
void layer_norm_backward(Index rows, Index cols, const T* xhat, const T* rstd, const T* gamma,
                         const T* gy, T* gx, T* ggamma, T* gbeta);

namespace reference {

template <typename T>
void gemm(Trans ta, Trans tb, Index m, Index n, Index k, T alpha, const T* a, const T* b, T beta,
          T* c);
template <typename T>
void conv2d_forward(const ConvGeometry& g, const T* x, const T* w, const T* bias, T* y);
template <typename T>
void conv2d_backward(const ConvGeometry& g, const T* x, const T* w, const T* gy, T* gx, T* gw,
                     T* gb);
template <typename T>
void depthwise3x3_forward(Index batch, Index height, Index width, Index channels, const T* x,
                          const T* w, const T* bias, T* y);
template <typename T>
void depthwise3x3_backward(Index batch, Index height, Index width, Index channels, const T* x,
                           const T* w, const T* gy, T* gx, T* gw, T* gb);
template <typename T>
void window_attention_forward(const AttentionGeometry& g, const T* q, const T* k, const T* v,
                              const T* bias, const T* mask, T scale, T* probs, T* out);
template <typename T>
void window_attention_backward(const AttentionGeometry& g, const T* q, const T* k, const T* v,
                               const T* probs, const T* gout, T scale, T* gq, T* gk, T* gv,
                               T* gbias);
template <typename T>
void layer_norm_forward(Index rows, Index cols, const T* x, const T* gamma, const T* beta, T eps,
                        T* y, T* xhat, T* rstd);
template <typename T>
void layer_norm_backward(Index rows, Index cols, const T* xhat, const T* rstd, const T* gamma,
                         const T* gy, T* gx, T* ggamma, T* gbeta);

}  // namespace reference

/// Number of OpenMP threads the parallel kernels will use (1 without OpenMP).
int max_threads();

}  // namespace affseg::kernels
