#pragma once

#include "affseg/tensor.hpp"

namespace affseg {

inline constexpr double kDiceSmoothing = 1e-5;

struct LossValue {
  double total = 0;
  double dice_term = 0;
  double bce_term = 0;
};

/// Soft Dice averaged over batch samples plus pixel-mean binary
/// cross-entropy, both on p = sigmoid(logits).
/// logits and targets are [B, 1, H, W]; targets must be 0 or 1.
/// When grad is non-null it receives d(total)/d(logits).
template <typename T>
LossValue bce_dice_loss(const Tensor<T>& logits, const Tensor<T>& targets, Tensor<T>* grad = nullptr,
                        double eps = kDiceSmoothing);

/// Softmax over K >= 2 classes. Dice is averaged over foreground classes
/// 1..K-1 and batch samples; the cross-entropy is a pixel mean.
/// logits [B, K, H, W], labels [B, H, W] with values in [0, K).
template <typename T>
LossValue bce_dice_loss_multiclass(const Tensor<T>& logits, const Tensor<int>& labels,
                                   Tensor<T>* grad = nullptr, double eps = kDiceSmoothing);

/// Dispatches on the logit channel count: K = 1 uses the binary loss with
/// labels as targets, K >= 2 the multiclass one.
template <typename T>
LossValue segmentation_loss(const Tensor<T>& logits, const Tensor<int>& labels,
                            Tensor<T>* grad = nullptr);

}  // namespace affseg
