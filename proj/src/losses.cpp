#include "affseg/losses.hpp"

#include <cmath>
#include <vector>

#include "affseg/nn/layers.hpp"

namespace affseg {

namespace {

// -log(sigmoid(z)) for target 1, -log(1 - sigmoid(z)) for target 0.
double stable_bce(double z, double y) {
  return std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
}

}  // namespace

template <typename T>
LossValue bce_dice_loss(const Tensor<T>& logits, const Tensor<T>& targets, Tensor<T>* grad,
                        double eps) {
  logits.require_rank(4, "bce_dice_loss logits");
  if (logits.dim(1) != 1)
    throw ShapeError("bce_dice_loss: expected one logit channel, got " + to_string(logits.shape()));
  targets.require_shape(logits.shape(), "bce_dice_loss targets");
  for (Index i = 0; i < targets.size(); ++i)
    if (targets[i] != T(0) && targets[i] != T(1))
      throw DataError("bce_dice_loss: target value " + std::to_string(static_cast<double>(targets[i])) +
                      " at index " + std::to_string(i) + " is not 0 or 1");
  const Index b = logits.dim(0);
  const Index n = logits.size() / b;
  const double total_pixels = static_cast<double>(logits.size());

  LossValue out;
  std::vector<double> p(static_cast<std::size_t>(n));
  if (grad) *grad = Tensor<T>(logits.shape());
  for (Index s = 0; s < b; ++s) {
    double inter = 0, sum_y = 0, sum_p = 0, bce = 0;
    for (Index j = 0; j < n; ++j) {
      const double z = static_cast<double>(logits[s * n + j]);
      const double y = static_cast<double>(targets[s * n + j]);
      p[static_cast<std::size_t>(j)] = nn::sigmoid(z);
      inter += y * p[static_cast<std::size_t>(j)];
      sum_y += y;
      sum_p += p[static_cast<std::size_t>(j)];
      bce += stable_bce(z, y);
    }
    const double denom = sum_y + sum_p + eps;
    out.dice_term += (1.0 - (2.0 * inter + eps) / denom) / static_cast<double>(b);
    out.bce_term += bce / total_pixels;
    if (!grad) continue;
    for (Index j = 0; j < n; ++j) {
      const double pj = p[static_cast<std::size_t>(j)];
      const double y = static_cast<double>(targets[s * n + j]);
      const double ddice_dp = -(2.0 * y * denom - (2.0 * inter + eps)) / (denom * denom) / static_cast<double>(b);
      (*grad)[s * n + j] = static_cast<T>(ddice_dp * pj * (1.0 - pj) + (pj - y) / total_pixels);
    }
  }
  out.total = out.dice_term + out.bce_term;
  return out;
}

template <typename T>
LossValue bce_dice_loss_multiclass(const Tensor<T>& logits, const Tensor<int>& labels, Tensor<T>* grad,
                                   double eps) {
  logits.require_rank(4, "bce_dice_loss_multiclass logits");
  const Index b = logits.dim(0), k = logits.dim(1);
  const Index n = logits.dim(2) * logits.dim(3);
  if (k < 2) throw ShapeError("bce_dice_loss_multiclass: need at least 2 classes, got " + to_string(logits.shape()));
  labels.require_shape({b, logits.dim(2), logits.dim(3)}, "bce_dice_loss_multiclass labels");
  for (Index i = 0; i < labels.size(); ++i)
    if (labels[i] < 0 || labels[i] >= k)
      throw DataError("bce_dice_loss_multiclass: label " + std::to_string(labels[i]) + " at index " +
                      std::to_string(i) + " outside [0, " + std::to_string(k) + ")");
  const double total_pixels = static_cast<double>(b * n);
  const double dice_norm = static_cast<double>(b * (k - 1));

  LossValue out;
  std::vector<double> p(static_cast<std::size_t>(k * n));
  if (grad) *grad = Tensor<T>(logits.shape());
  for (Index s = 0; s < b; ++s) {
    const T* z = logits.data() + s * k * n;
    const int* y = labels.data() + s * n;
    for (Index j = 0; j < n; ++j) {
      double zmax = static_cast<double>(z[j]);
      for (Index c = 1; c < k; ++c) zmax = std::max(zmax, static_cast<double>(z[c * n + j]));
      double denom = 0;
      for (Index c = 0; c < k; ++c) denom += std::exp(static_cast<double>(z[c * n + j]) - zmax);
      const double log_denom = std::log(denom);
      for (Index c = 0; c < k; ++c)
        p[static_cast<std::size_t>(c * n + j)] = std::exp(static_cast<double>(z[c * n + j]) - zmax - log_denom);
      out.bce_term -= (static_cast<double>(z[y[j] * n + j]) - zmax - log_denom) / total_pixels;
    }
    // d(total)/d(p) collected per class, then pushed through the softmax
    std::vector<double> gp(grad ? static_cast<std::size_t>(k * n) : 0, 0.0);
    for (Index c = 1; c < k; ++c) {
      double inter = 0, sum_y = 0, sum_p = 0;
      for (Index j = 0; j < n; ++j) {
        const double yc = y[j] == c ? 1.0 : 0.0;
        const double pc = p[static_cast<std::size_t>(c * n + j)];
        inter += yc * pc;
        sum_y += yc;
        sum_p += pc;
      }
      const double denom = sum_y + sum_p + eps;
      out.dice_term += (1.0 - (2.0 * inter + eps) / denom) / dice_norm;
      if (!grad) continue;
      for (Index j = 0; j < n; ++j) {
        const double yc = y[j] == c ? 1.0 : 0.0;
        gp[static_cast<std::size_t>(c * n + j)] =
            -(2.0 * yc * denom - (2.0 * inter + eps)) / (denom * denom) / dice_norm;
      }
    }
    if (!grad) continue;
    T* g = grad->data() + s * k * n;
    for (Index j = 0; j < n; ++j) {
      double dot = 0;
      for (Index c = 0; c < k; ++c)
        dot += p[static_cast<std::size_t>(c * n + j)] * gp[static_cast<std::size_t>(c * n + j)];
      for (Index c = 0; c < k; ++c) {
        const double pc = p[static_cast<std::size_t>(c * n + j)];
        const double ce = (pc - (y[j] == c ? 1.0 : 0.0)) / total_pixels;
        g[c * n + j] = static_cast<T>(pc * (gp[static_cast<std::size_t>(c * n + j)] - dot) + ce);
      }
    }
  }
  out.total = out.dice_term + out.bce_term;
  return out;
}

template <typename T>
LossValue segmentation_loss(const Tensor<T>& logits, const Tensor<int>& labels, Tensor<T>* grad) {
  logits.require_rank(4, "segmentation_loss");
  if (logits.dim(1) >= 2) return bce_dice_loss_multiclass(logits, labels, grad);
  labels.require_shape({logits.dim(0), logits.dim(2), logits.dim(3)}, "segmentation_loss labels");
  Tensor<T> targets(logits.shape());
  for (Index i = 0; i < labels.size(); ++i) targets[i] = static_cast<T>(labels[i]);
  return bce_dice_loss(logits, targets, grad);
}

#define AFFSEG_INSTANTIATE_LOSSES(T)                                                              \
  template LossValue bce_dice_loss<T>(const Tensor<T>&, const Tensor<T>&, Tensor<T>*, double);     \
  template LossValue bce_dice_loss_multiclass<T>(const Tensor<T>&, const Tensor<int>&, Tensor<T>*, \
                                                 double);                                          \
  template LossValue segmentation_loss<T>(const Tensor<T>&, const Tensor<int>&, Tensor<T>*);

AFFSEG_INSTANTIATE_LOSSES(float)
AFFSEG_INSTANTIATE_LOSSES(double)

}  // namespace affseg
