#include "affseg/metrics.hpp"

#include <cstdio>
#include <sstream>

namespace affseg {

namespace {

struct Counts {
  Index inter = 0;
  Index pred = 0;
  Index gt = 0;
};

Counts count_class(const int* pred, const int* gt, Index n, int class_id) {
  Counts c;
  for (Index i = 0; i < n; ++i) {
    const bool p = pred[i] == class_id, g = gt[i] == class_id;
    c.pred += p;
    c.gt += g;
    c.inter += p && g;
  }
  return c;
}

double dsc_of(const Counts& c) {
  if (c.pred + c.gt == 0) return 1.0;
  return 2.0 * static_cast<double>(c.inter) / static_cast<double>(c.pred + c.gt);
}

double iou_of(const Counts& c) {
  const Index uni = c.pred + c.gt - c.inter;
  if (uni == 0) return 1.0;
  return static_cast<double>(c.inter) / static_cast<double>(uni);
}

void require_same(const Tensor<int>& pred, const Tensor<int>& gt, const char* what) {
  if (pred.shape() != gt.shape())
    throw ShapeError(std::string(what) + ": prediction " + to_string(pred.shape()) +
                     " vs ground truth " + to_string(gt.shape()));
}

}  // namespace

double dsc(const Tensor<int>& pred, const Tensor<int>& gt, int class_id) {
  require_same(pred, gt, "dsc");
  return dsc_of(count_class(pred.data(), gt.data(), pred.size(), class_id));
}

double iou(const Tensor<int>& pred, const Tensor<int>& gt, int class_id) {
  require_same(pred, gt, "iou");
  return iou_of(count_class(pred.data(), gt.data(), pred.size(), class_id));
}

double miou(const Tensor<int>& pred, const Tensor<int>& gt, const std::vector<int>& class_ids) {
  require_same(pred, gt, "miou");
  if (class_ids.empty()) throw std::invalid_argument("miou: no classes given");
  double sum = 0;
  for (int c : class_ids) sum += iou_of(count_class(pred.data(), gt.data(), pred.size(), c));
  return sum / static_cast<double>(class_ids.size());
}

template <typename T>
Tensor<int> predict_labels(const Tensor<T>& logits) {
  logits.require_rank(4, "predict_labels");
  const Index b = logits.dim(0), k = logits.dim(1), n = logits.dim(2) * logits.dim(3);
  Tensor<int> out({b, logits.dim(2), logits.dim(3)});
  for (Index s = 0; s < b; ++s) {
    const T* z = logits.data() + s * k * n;
    for (Index j = 0; j < n; ++j) {
      if (k == 1) {
        out[s * n + j] = z[j] > T(0) ? 1 : 0;
        continue;
      }
      int best = 0;
      for (Index c = 1; c < k; ++c)
        if (z[c * n + j] > z[best * n + j]) best = static_cast<int>(c);
      out[s * n + j] = best;
    }
  }
  return out;
}

template Tensor<int> predict_labels<float>(const Tensor<float>&);
template Tensor<int> predict_labels<double>(const Tensor<double>&);

std::vector<int> foreground_classes(int num_classes) {
  if (num_classes <= 2) return {1};
  std::vector<int> out;
  for (int c = 1; c < num_classes; ++c) out.push_back(c);
  return out;
}

std::vector<std::string> default_class_names(const std::vector<int>& classes) {
  std::vector<std::string> names;
  for (int c : classes) names.push_back("class_" + std::to_string(c));
  return names;
}

MetricsAccumulator::MetricsAccumulator(std::vector<int> classes, std::vector<std::string> names)
    : classes_(std::move(classes)),
      names_(names.empty() ? default_class_names(classes_) : std::move(names)),
      dsc_sum_(classes_.size(), 0.0),
      iou_sum_(classes_.size(), 0.0) {
  if (classes_.empty()) throw std::invalid_argument("MetricsAccumulator: no classes");
  if (names_.size() != classes_.size())
    throw std::invalid_argument("MetricsAccumulator: " + std::to_string(names_.size()) + " names for " +
                                std::to_string(classes_.size()) + " classes");
}

void MetricsAccumulator::add(const Tensor<int>& pred, const Tensor<int>& gt) {
  require_same(pred, gt, "MetricsAccumulator::add");
  if (pred.rank() != 2 && pred.rank() != 3)
    throw ShapeError("MetricsAccumulator::add: expected [H, W] or [B, H, W], got " + to_string(pred.shape()));
  const Index batch = pred.rank() == 3 ? pred.dim(0) : 1;
  const Index n = pred.size() / batch;
  for (Index s = 0; s < batch; ++s) {
    for (std::size_t i = 0; i < classes_.size(); ++i) {
      const Counts c = count_class(pred.data() + s * n, gt.data() + s * n, n, classes_[i]);
      dsc_sum_[i] += dsc_of(c);
      iou_sum_[i] += iou_of(c);
    }
    ++images_;
  }
}

MetricsReport MetricsAccumulator::report() const {
  if (images_ == 0) throw std::logic_error("MetricsAccumulator::report: no images added");
  MetricsReport r;
  r.class_names = names_;
  for (std::size_t i = 0; i < classes_.size(); ++i) {
    r.per_class_dsc.push_back(dsc_sum_[i] / static_cast<double>(images_));
    r.per_class_iou.push_back(iou_sum_[i] / static_cast<double>(images_));
    r.mean_dsc += r.per_class_dsc.back();
    r.mean_iou += r.per_class_iou.back();
  }
  r.mean_dsc /= static_cast<double>(classes_.size());
  r.mean_iou /= static_cast<double>(classes_.size());
  return r;
}

nlohmann::json to_json(const MetricsReport& r) {
  return {{"format_version", 1},
          {"class_names", r.class_names},
          {"per_class_dsc", r.per_class_dsc},
          {"per_class_iou", r.per_class_iou},
          {"mean_dsc", r.mean_dsc},
          {"mean_iou", r.mean_iou}};
}

MetricsReport metrics_report_from_json(const nlohmann::json& j) {
  try {
    MetricsReport r;
    j.at("class_names").get_to(r.class_names);
    j.at("per_class_dsc").get_to(r.per_class_dsc);
    j.at("per_class_iou").get_to(r.per_class_iou);
    j.at("mean_dsc").get_to(r.mean_dsc);
    j.at("mean_iou").get_to(r.mean_iou);
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("metrics report: ") + e.what());
  }
}

std::string format_table(const MetricsReport& r) {
  std::size_t width = 7;
  for (const auto& n : r.class_names) width = std::max(width, n.size());
  std::ostringstream os;
  char buf[128];
  std::snprintf(buf, sizeof buf, "%-*s  %8s  %8s\n", static_cast<int>(width), "class", "DSC(%)", "mIoU(%)");
  os << buf;
  for (std::size_t i = 0; i < r.class_names.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%-*s  %8.2f  %8.2f\n", static_cast<int>(width), r.class_names[i].c_str(),
                  100.0 * r.per_class_dsc[i], 100.0 * r.per_class_iou[i]);
    os << buf;
  }
  std::snprintf(buf, sizeof buf, "%-*s  %8.2f  %8.2f\n", static_cast<int>(width), "average", 100.0 * r.mean_dsc,
                100.0 * r.mean_iou);
  os << buf;
  return os.str();
}

}  // namespace affseg
