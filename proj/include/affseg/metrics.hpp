#pragma once

#include <string>
#include <vector>

#include "json.hpp"

#include "affseg/tensor.hpp"

namespace affseg {

/// 2|P ∩ G| / (|P| + |G|) for one class over two [H, W] label maps.
/// Both sets empty gives 1.
double dsc(const Tensor<int>& pred, const Tensor<int>& gt, int class_id);
/// |P ∩ G| / |P ∪ G|, 1 when both sets are empty.
double iou(const Tensor<int>& pred, const Tensor<int>& gt, int class_id);
/// Mean IoU over class_ids.
double miou(const Tensor<int>& pred, const Tensor<int>& gt, const std::vector<int>& class_ids);

/// Argmax over the class axis for K >= 2, sigmoid > 0.5 for K = 1.
/// logits [B, K, H, W] -> labels [B, H, W].
template <typename T>
Tensor<int> predict_labels(const Tensor<T>& logits);

struct MetricsReport {
  std::vector<std::string> class_names;
  std::vector<double> per_class_dsc;
  std::vector<double> per_class_iou;
  double mean_dsc = 0;
  double mean_iou = 0;
};

nlohmann::json to_json(const MetricsReport& r);
MetricsReport metrics_report_from_json(const nlohmann::json& j);
/// Aligned text table, values as percentages with two decimals.
std::string format_table(const MetricsReport& r);

/// Foreground classes evaluated for a model with num_classes outputs:
/// 1..K-1, or {1} for a single-logit binary model.
std::vector<int> foreground_classes(int num_classes);
std::vector<std::string> default_class_names(const std::vector<int>& classes);

/// Per-image DSC/IoU for each evaluated class, averaged over images in the
/// order they were added.
class MetricsAccumulator {
 public:
  explicit MetricsAccumulator(std::vector<int> classes, std::vector<std::string> names = {});

  /// pred and gt are [H, W] or batched [B, H, W].
  void add(const Tensor<int>& pred, const Tensor<int>& gt);
  Index images() const { return images_; }
  MetricsReport report() const;

 private:
  std::vector<int> classes_;
  std::vector<std::string> names_;
  std::vector<double> dsc_sum_;
  std::vector<double> iou_sum_;
  Index images_ = 0;
};

}  // namespace affseg
