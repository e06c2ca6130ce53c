#include "affseg/training.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>

#include "affseg/losses.hpp"

namespace affseg {

namespace fs = std::filesystem;
using nlohmann::json;

double cosine_lr(std::int64_t t, std::int64_t total, double lr_init, double lr_final) {
  if (total < 1) throw ConfigError("cosine_lr: total steps must be >= 1, got " + std::to_string(total));
  if (t < 0) throw ConfigError("cosine_lr: negative step " + std::to_string(t));
  if (t >= total) return lr_final;
  const double phase = std::numbers::pi * static_cast<double>(t) / static_cast<double>(total);
  return lr_final + 0.5 * (lr_init - lr_final) * (1.0 + std::cos(phase));
}

template <typename T>
void sgd_step(const nn::ParamRefs<T>& params, OptimizerState<T>& state, double lr, double momentum,
              double weight_decay) {
  if (state.velocity.empty())
    for (const auto& [name, p] : params) state.velocity.emplace_back(p->value.shape());
  if (state.velocity.size() != params.size())
    throw ShapeError("sgd_step: optimizer tracks " + std::to_string(state.velocity.size()) + " tensors, model has " +
                     std::to_string(params.size()));
  for (const auto& [name, p] : params) {
    const Tensor<T>& g = p->grad;
    for (Index i = 0; i < g.size(); ++i)
      if (!std::isfinite(static_cast<double>(g[i])))
        throw NumericError("non-finite gradient in parameter " + name + " at element " + std::to_string(i));
  }
  const T mu = static_cast<T>(momentum), wd = static_cast<T>(weight_decay), rate = static_cast<T>(lr);
  for (std::size_t k = 0; k < params.size(); ++k) {
    nn::Parameter<T>& p = *params[k].second;
    Tensor<T>& v = state.velocity[k];
    v.require_shape(p.value.shape(), params[k].first.c_str());
    T* theta = p.value.data();
    const T* g = p.grad.data();
    T* vel = v.data();
    const Index n = v.size();
#pragma omp parallel for schedule(static)
    for (Index i = 0; i < n; ++i) {
      vel[i] = mu * vel[i] + (g[i] + wd * theta[i]);
      theta[i] -= rate * vel[i];
    }
  }
  ++state.step;
  state.current_lr = lr;
}

// ---------------------------------------------------------------- history

json to_json(const EpochRecord& r) {
  return {{"epoch", r.epoch},
          {"train_loss", r.train_loss},
          {"val_mean_dsc", r.val_mean_dsc},
          {"val_mean_iou", r.val_mean_iou},
          {"lr", r.lr}};
}

json to_json(const std::vector<EpochRecord>& history) {
  json arr = json::array();
  for (const auto& r : history) arr.push_back(to_json(r));
  return arr;
}

std::vector<EpochRecord> history_from_json(const json& j) {
  std::vector<EpochRecord> out;
  for (const auto& e : j) {
    EpochRecord r;
    e.at("epoch").get_to(r.epoch);
    e.at("train_loss").get_to(r.train_loss);
    e.at("val_mean_dsc").get_to(r.val_mean_dsc);
    e.at("val_mean_iou").get_to(r.val_mean_iou);
    e.at("lr").get_to(r.lr);
    out.push_back(r);
  }
  return out;
}

// -------------------------------------------------------------- evaluation

template <typename T>
AffSegNet<T> model_from_checkpoint(const Checkpoint<T>& ckpt) {
  AffSegNet<T> model(ckpt.model, 0);
  model.load_state(ckpt.params);
  return model;
}

template <typename T>
MetricsReport evaluate(const AffSegNet<T>& model, const std::vector<SegmentationSample>& samples, int batch_size) {
  if (samples.empty()) throw DataError("evaluate: no samples");
  check_compatible(samples, model.config());
  MetricsAccumulator acc(foreground_classes(model.config().num_classes));
  for (std::size_t start = 0; start < samples.size(); start += static_cast<std::size_t>(batch_size)) {
    std::vector<std::size_t> idx(std::min(samples.size() - start, static_cast<std::size_t>(batch_size)));
    std::iota(idx.begin(), idx.end(), start);
    const Batch<T> batch = make_batch<T>(samples, idx);
    acc.add(predict_labels(model.forward(batch.images)), batch.labels);
  }
  return acc.report();
}

// ----------------------------------------------------------------- trainer

namespace {

void require_trainable(const TrainConfig& cfg) {
  // Equal learning rates are a constant schedule; everything else must
  // pass the regular validation.
  TrainConfig probe = cfg;
  if (probe.lr_final == probe.lr_init && probe.lr_init > 0) probe.lr_final = probe.lr_init / 2;
  require_valid(probe);
}

bool augmentation_on(const AugmentConfig& a) { return a.hflip_prob > 0 || a.rotate_max_deg > 0; }

constexpr std::uint64_t kShuffleStream = 0x5348554646ULL;
constexpr std::uint64_t kAugmentStream = 0x4155474dULL;

}  // namespace

template <typename T>
Trainer<T>::Trainer(const ModelConfig& model_cfg, const TrainConfig& train_cfg, std::vector<SegmentationSample> train,
                    std::vector<SegmentationSample> val)
    : model_cfg_(model_cfg), train_cfg_(train_cfg), train_(std::move(train)), val_(std::move(val)) {
  require_valid(model_cfg_);
  require_trainable(train_cfg_);
  if (train_.empty()) throw DataError("trainer: empty training set");
  if (val_.empty()) throw DataError("trainer: empty validation set");
  check_compatible(train_, model_cfg_);
  check_compatible(val_, model_cfg_);
  model_ = AffSegNet<T>(model_cfg_, static_cast<std::uint64_t>(train_cfg_.seed));
}

template <typename T>
std::int64_t Trainer<T>::steps_per_epoch() const {
  const auto n = static_cast<std::int64_t>(train_.size());
  return (n + train_cfg_.batch_size - 1) / train_cfg_.batch_size;
}

template <typename T>
std::int64_t Trainer<T>::total_steps() const {
  return steps_per_epoch() * train_cfg_.epochs;
}

template <typename T>
std::vector<std::size_t> Trainer<T>::epoch_order(int epoch) const {
  std::vector<std::size_t> order(train_.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(derive_seed(static_cast<std::uint64_t>(train_cfg_.seed), kShuffleStream,
                                  static_cast<std::uint64_t>(epoch)));
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

template <typename T>
double Trainer<T>::step() {
  const std::int64_t spe = steps_per_epoch();
  const int epoch = static_cast<int>(opt_.step / spe);
  const auto b = static_cast<std::size_t>(opt_.step % spe);
  const auto order = epoch_order(epoch);
  const auto bs = static_cast<std::size_t>(train_cfg_.batch_size);
  const std::size_t begin = b * bs, end = std::min(order.size(), begin + bs);

  std::vector<SegmentationSample> picked;
  for (std::size_t i = begin; i < end; ++i) {
    const auto& s = train_[order[i]];
    if (augmentation_on(train_cfg_.augment)) {
      std::mt19937_64 rng(derive_seed(static_cast<std::uint64_t>(train_cfg_.seed),
                                      kAugmentStream ^ static_cast<std::uint64_t>(epoch), s.id));
      picked.push_back(augment(s, train_cfg_.augment, rng));
    } else {
      picked.push_back(s);
    }
  }
  std::vector<std::size_t> idx(picked.size());
  std::iota(idx.begin(), idx.end(), 0);
  const Batch<T> batch = make_batch<T>(picked, idx);

  const double lr = train_cfg_.lr_init == train_cfg_.lr_final
                        ? train_cfg_.lr_init
                        : cosine_lr(opt_.step, total_steps(), train_cfg_.lr_init, train_cfg_.lr_final);
  typename AffSegNet<T>::Cache cache;
  const Tensor<T> logits = model_.forward(batch.images, &cache);
  Tensor<T> grad;
  const LossValue loss = segmentation_loss(logits, batch.labels, &grad);
  if (!std::isfinite(loss.total))
    throw NumericError("non-finite loss at step " + std::to_string(opt_.step) + " (epoch " + std::to_string(epoch) + ")");
  model_.zero_grad();
  model_.backward(cache, grad);
  sgd_step(model_.params(), opt_, lr, train_cfg_.momentum, train_cfg_.weight_decay);
  partial_loss_sum_ += loss.total;
  return loss.total;
}

template <typename T>
EpochRecord Trainer<T>::run_epoch() {
  const std::int64_t spe = steps_per_epoch();
  const std::int64_t target = (opt_.step / spe + 1) * spe;
  while (opt_.step < target) step();
  const MetricsReport val = evaluate(model_, val_, train_cfg_.batch_size);
  EpochRecord rec{completed_epochs(), partial_loss_sum_ / static_cast<double>(spe), val.mean_dsc, val.mean_iou,
                  opt_.current_lr};
  partial_loss_sum_ = 0;
  history_.push_back(rec);
  return rec;
}

template <typename T>
std::vector<EpochRecord> Trainer<T>::fit(const TrainOptions& options) {
  const auto& dir = options.out_dir;
  if (dir) {
    fs::create_directories(*dir);
    save_config(*dir / "config.json", model_cfg_, train_cfg_);
  }
  auto write_history = [&] {
    std::ofstream f(*dir / "metrics_history.json");
    f << json{{"format_version", kCheckpointFormatVersion}, {"history", to_json(history_)}}.dump(2) << '\n';
  };
  double best = -1;
  for (const auto& r : history_) best = std::max(best, r.val_mean_dsc);
  Checkpoint<T> last_good = checkpoint();
  while (completed_epochs() < train_cfg_.epochs) {
    EpochRecord rec;
    try {
      rec = run_epoch();
    } catch (const NumericError&) {
      if (dir) save_checkpoint(*dir / "last_good.ckpt", last_good);
      throw;
    }
    last_good = checkpoint();
    if (dir) {
      write_history();
      if (rec.val_mean_dsc > best) save_checkpoint(*dir / "best.ckpt", last_good);
    }
    best = std::max(best, rec.val_mean_dsc);
    if (options.on_epoch) options.on_epoch(rec);
  }
  if (dir) {
    save_checkpoint(*dir / "final.ckpt", checkpoint());
    write_history();
  }
  return history_;
}

template <typename T>
Checkpoint<T> Trainer<T>::checkpoint() {
  Checkpoint<T> c;
  c.model = model_cfg_;
  c.train = train_cfg_;
  c.step = opt_.step;
  c.current_lr = opt_.current_lr;
  c.partial_loss_sum = partial_loss_sum_;
  c.history = history_;
  const auto params = model_.params();
  for (std::size_t k = 0; k < params.size(); ++k) {
    c.params.emplace(params[k].first, params[k].second->value);
    if (!opt_.velocity.empty()) c.velocity.emplace(params[k].first, opt_.velocity[k]);
  }
  return c;
}

template <typename T>
void Trainer<T>::restore(const Checkpoint<T>& ckpt) {
  if (!(ckpt.model == model_cfg_))
    throw ConfigError("checkpoint model config does not match the trainer's model config");
  model_.load_state(ckpt.params);
  opt_ = OptimizerState<T>{};
  opt_.step = ckpt.step;
  opt_.current_lr = ckpt.current_lr;
  if (!ckpt.velocity.empty()) {
    for (const auto& [name, p] : model_.params()) {
      auto it = ckpt.velocity.find(name);
      if (it == ckpt.velocity.end()) throw ParseError("checkpoint has no velocity for " + name);
      it->second.require_shape(p->value.shape(), name.c_str());
      opt_.velocity.push_back(it->second);
    }
  }
  partial_loss_sum_ = ckpt.partial_loss_sum;
  history_ = ckpt.history;
}

// ---------------------------------------------------------------- ablation

std::vector<std::pair<std::string, AblationFlags>> ablation_matrix() {
  return {{"no EFFN", {false, true, true, true}},
          {"no LRD", {true, false, true, true}},
          {"no MFF", {true, true, false, true}},
          {"no ASC", {true, true, true, false}},
          {"all on", {true, true, true, true}}};
}

template <typename T>
std::vector<AblationRow> run_ablation(const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                                      const std::vector<SegmentationSample>& train,
                                      const std::vector<SegmentationSample>& val,
                                      const std::vector<SegmentationSample>& eval,
                                      const std::function<void(const std::vector<AblationRow>&)>& on_row) {
  std::vector<AblationRow> rows;
  for (const auto& [name, flags] : ablation_matrix()) {
    ModelConfig cfg = model_cfg;
    cfg.ablation = flags;
    Trainer<T> trainer(cfg, train_cfg, train, val);
    const auto history = trainer.fit();
    AblationRow row{name, flags, trainer.model().parameter_count(), history.back().train_loss,
                    evaluate(trainer.model(), eval, train_cfg.batch_size)};
    rows.push_back(std::move(row));
    if (on_row) on_row(rows);
  }
  return rows;
}

json to_json(const std::vector<AblationRow>& rows) {
  json arr = json::array();
  for (const auto& r : rows)
    arr.push_back({{"name", r.name},
                   {"effn", r.flags.effn_enabled},
                   {"lrd", r.flags.lrd_enabled},
                   {"mff", r.flags.mff_enabled},
                   {"asc", r.flags.asc_enabled},
                   {"param_count", r.param_count},
                   {"final_train_loss", r.final_train_loss},
                   {"metrics", to_json(r.report)}});
  return {{"format_version", kCheckpointFormatVersion}, {"rows", arr}};
}

std::string format_ablation_table(const std::vector<AblationRow>& rows) {
  std::string out = "EFFN  LRD  MFF  ASC  params      DSC(%)  mIoU(%)\n";
  char buf[128];
  auto mark = [](bool on) { return on ? "yes" : "no"; };
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-4s  %-3s  %-3s  %-3s  %-10lld  %6.2f  %7.2f\n", mark(r.flags.effn_enabled),
                  mark(r.flags.lrd_enabled), mark(r.flags.mff_enabled), mark(r.flags.asc_enabled),
                  static_cast<long long>(r.param_count), 100.0 * r.report.mean_dsc, 100.0 * r.report.mean_iou);
    out += buf;
  }
  return out;
}

#define AFFSEG_INSTANTIATE_TRAINING(T)                                                                         \
  template void sgd_step<T>(const nn::ParamRefs<T>&, OptimizerState<T>&, double, double, double);             \
  template AffSegNet<T> model_from_checkpoint<T>(const Checkpoint<T>&);                                       \
  template MetricsReport evaluate<T>(const AffSegNet<T>&, const std::vector<SegmentationSample>&, int);       \
  template class Trainer<T>;                                                                                   \
  template std::vector<AblationRow> run_ablation<T>(                                                           \
      const ModelConfig&, const TrainConfig&, const std::vector<SegmentationSample>&,                          \
      const std::vector<SegmentationSample>&, const std::vector<SegmentationSample>&,                          \
      const std::function<void(const std::vector<AblationRow>&)>&);

AFFSEG_INSTANTIATE_TRAINING(float)
AFFSEG_INSTANTIATE_TRAINING(double)

}  // namespace affseg
