#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "affseg/config.hpp"
#include "affseg/data.hpp"
#include "affseg/metrics.hpp"
#include "affseg/model.hpp"

namespace affseg {

inline constexpr int kCheckpointFormatVersion = 1;

/// lr_final + (lr_init - lr_final) * (1 + cos(pi t / T)) / 2, clamped to
/// lr_final for t > T.
double cosine_lr(std::int64_t t, std::int64_t total, double lr_init, double lr_final);

template <typename T>
struct OptimizerState {
  std::vector<Tensor<T>> velocity;  // one per parameter, in params() order
  std::int64_t step = 0;
  double current_lr = 0;
};

/// Heavy-ball SGD with coupled weight decay:
///   v <- momentum * v + (g + weight_decay * theta);  theta <- theta - lr * v
/// Throws NumericError naming the first parameter with a non-finite gradient.
template <typename T>
void sgd_step(const nn::ParamRefs<T>& params, OptimizerState<T>& state, double lr, double momentum,
              double weight_decay);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0;
  double val_mean_dsc = 0;
  double val_mean_iou = 0;
  double lr = 0;
};

nlohmann::json to_json(const EpochRecord& r);
nlohmann::json to_json(const std::vector<EpochRecord>& history);
std::vector<EpochRecord> history_from_json(const nlohmann::json& j);

template <typename T>
struct Checkpoint {
  ModelConfig model;
  TrainConfig train;
  std::int64_t step = 0;
  double current_lr = 0;
  double partial_loss_sum = 0;  // loss accumulated in the unfinished epoch
  std::map<std::string, Tensor<T>> params;
  std::map<std::string, Tensor<T>> velocity;
  std::vector<EpochRecord> history;
};

/// Binary file of named blocks plus a JSON sidecar at <path>.json.
template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Checkpoint<T>& ckpt);
/// Reads either precision and converts to T. Throws ParseError.
template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path);
std::filesystem::path sidecar_path(const std::filesystem::path& ckpt);

/// Model restored from a checkpoint's config and parameters.
template <typename T>
AffSegNet<T> model_from_checkpoint(const Checkpoint<T>& ckpt);

/// Per-image DSC / IoU over foreground classes.
template <typename T>
MetricsReport evaluate(const AffSegNet<T>& model, const std::vector<SegmentationSample>& samples,
                       int batch_size = 4);

struct TrainOptions {
  std::optional<std::filesystem::path> out_dir;  // best/final checkpoints and history
  std::function<void(const EpochRecord&)> on_epoch;
};

/// Step-indexed training loop. Global step s belongs to epoch
/// s / steps_per_epoch(); the batch order of an epoch and the augmentation
/// of each sample are functions of (seed, epoch, sample id) only, so a
/// run resumed from any step replays the same trajectory.
template <typename T>
class Trainer {
 public:
  Trainer(const ModelConfig& model_cfg, const TrainConfig& train_cfg, std::vector<SegmentationSample> train,
          std::vector<SegmentationSample> val);

  std::int64_t steps_per_epoch() const;
  std::int64_t total_steps() const;
  std::int64_t global_step() const { return opt_.step; }
  int completed_epochs() const { return static_cast<int>(opt_.step / steps_per_epoch()); }
  std::vector<std::size_t> epoch_order(int epoch) const;

  /// One optimizer step; returns the batch loss.
  double step();
  /// Finishes the current epoch, validates, and appends to the history.
  EpochRecord run_epoch();
  /// Runs until cfg.epochs are complete.
  std::vector<EpochRecord> fit(const TrainOptions& options = {});

  Checkpoint<T> checkpoint();
  void restore(const Checkpoint<T>& ckpt);

  AffSegNet<T>& model() { return model_; }
  const std::vector<EpochRecord>& history() const { return history_; }
  const ModelConfig& model_config() const { return model_cfg_; }
  const TrainConfig& train_config() const { return train_cfg_; }

 private:
  ModelConfig model_cfg_;
  TrainConfig train_cfg_;
  std::vector<SegmentationSample> train_;
  std::vector<SegmentationSample> val_;
  AffSegNet<T> model_;
  OptimizerState<T> opt_;
  double partial_loss_sum_ = 0;
  std::vector<EpochRecord> history_;
};

struct AblationRow {
  std::string name;
  AblationFlags flags;
  Index param_count = 0;
  double final_train_loss = 0;
  MetricsReport report;
};

/// Each component off once, then everything on.
std::vector<std::pair<std::string, AblationFlags>> ablation_matrix();

/// Trains every variant with the same seed and data and evaluates it on
/// eval. on_row sees the completed rows after each variant.
template <typename T>
std::vector<AblationRow> run_ablation(const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                                      const std::vector<SegmentationSample>& train,
                                      const std::vector<SegmentationSample>& val,
                                      const std::vector<SegmentationSample>& eval,
                                      const std::function<void(const std::vector<AblationRow>&)>& on_row = {});

nlohmann::json to_json(const std::vector<AblationRow>& rows);
std::string format_ablation_table(const std::vector<AblationRow>& rows);

}  // namespace affseg
