// affseg: data generation, training, evaluation, prediction and ablation.
//
// Exit codes: 0 success, 2 usage / config / data error, 3 numeric failure.

#include <omp.h>

#include <array>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "affseg/data.hpp"
#include "affseg/training.hpp"

namespace fs = std::filesystem;
using namespace affseg;
using nlohmann::json;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitNumeric = 3;

void write_json(const fs::path& path, const json& j) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DataError("cannot write " + path.string());
  f << j.dump(2) << '\n';
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DataError("cannot write " + path.string());
  f << text;
}

json read_json(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw ParseError("cannot open " + path.string());
  try {
    return json::parse(f);
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

int gen_data(const std::string& spec_path, const fs::path& out, int n) {
  SyntheticSpec spec;
  if (!spec_path.empty()) spec = synthetic_spec_from_json(read_json(spec_path));
  validate(spec);
  fs::create_directories(out);
  const auto samples = generate_synthetic(spec, n);
  json manifest{{"format_version", 1}, {"spec", to_json(spec)}, {"n", n}, {"samples", json::array()}};
  for (const auto& s : samples) {
    save_sample(out, s);
    manifest["samples"].push_back({{"id", s.id}, {"image", s.id + "_img.png"}, {"mask", s.id + "_mask.png"}});
  }
  write_json(out / "manifest.json", manifest);
  std::cout << "wrote " << n << " samples to " << out.string() << "\n";
  return 0;
}

DataSplit load_split(const ModelConfig& cfg, const TrainConfig& tc, const fs::path& data) {
  auto samples = load_directory(data, cfg.num_classes, cfg.in_channels);
  check_compatible(samples, cfg);
  DataSplit parts = split(samples, static_cast<std::uint64_t>(tc.seed));
  for (const auto& w : parts.warnings) std::cerr << "warning: " << w << "\n";
  return parts;
}

int train(const fs::path& config, const fs::path& data, const fs::path& out, const std::string& resume) {
  const auto [cfg, tc] = load_config(config);
  DataSplit parts = load_split(cfg, tc, data);
  std::cout << "train " << parts.train.size() << ", val " << parts.val.size() << ", test " << parts.test.size()
            << "\n";
  Trainer<float> trainer(cfg, tc, std::move(parts.train), std::move(parts.val));
  if (!resume.empty()) {
    trainer.restore(load_checkpoint<float>(resume));
    std::cout << "resumed at epoch " << trainer.completed_epochs() << " (step " << trainer.global_step() << ")\n";
  }
  TrainOptions opts;
  opts.out_dir = out;
  opts.on_epoch = [&](const EpochRecord& r) {
    std::printf("epoch %4d/%d  loss %.5f  val DSC %.2f  mIoU %.2f  lr %.3g\n", r.epoch, tc.epochs, r.train_loss,
                100 * r.val_mean_dsc, 100 * r.val_mean_iou, r.lr);
    std::fflush(stdout);
  };
  trainer.fit(opts);
  for (const char* name : {"best.ckpt", "final.ckpt", "metrics_history.json", "config.json"})
    std::cout << (out / name).string() << "\n";
  return 0;
}

int eval(const fs::path& ckpt_path, const fs::path& data, const std::string& out) {
  const auto ckpt = load_checkpoint<float>(ckpt_path);
  const AffSegNet<float> model = model_from_checkpoint(ckpt);
  const auto samples = load_directory(data, ckpt.model.num_classes, ckpt.model.in_channels);
  check_compatible(samples, ckpt.model);
  const MetricsReport report = evaluate(model, samples, ckpt.train.batch_size);
  fs::path report_path = out;
  if (report_path.empty()) report_path = fs::path(ckpt_path.string() + ".eval.json");
  write_json(report_path, to_json(report));
  std::cout << format_table(report) << report_path.string() << "\n";
  return 0;
}

Tensor<float> overlay(const Tensor<float>& image, const Tensor<int>& mask) {
  static constexpr std::array<std::array<float, 3>, 6> colors{
      {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {1, 1, 0}, {1, 0, 1}, {0, 1, 1}}};
  const Index h = mask.dim(0), w = mask.dim(1), c = image.dim(0);
  Tensor<float> rgb({3, h, w});
  for (Index p = 0; p < h * w; ++p) {
    const int label = mask[p];
    for (Index ch = 0; ch < 3; ++ch) {
      const float base = image[(c == 3 ? ch : 0) * h * w + p];
      const float tint = label > 0 ? colors[static_cast<std::size_t>(label - 1) % colors.size()][ch] : base;
      rgb[ch * h * w + p] = label > 0 ? 0.5f * base + 0.5f * tint : base;
    }
  }
  return rgb;
}

int predict(const fs::path& ckpt_path, const fs::path& image_path, const fs::path& out, const std::string& overlay_path) {
  const auto ckpt = load_checkpoint<float>(ckpt_path);
  const AffSegNet<float> model = model_from_checkpoint(ckpt);
  const Tensor<float> image = read_png_image(image_path, ckpt.model.in_channels);
  if (image.dim(1) != ckpt.model.img_height || image.dim(2) != ckpt.model.img_width)
    throw DataError("image " + image_path.string() + " is " + std::to_string(image.dim(2)) + "x" +
                    std::to_string(image.dim(1)) + ", checkpoint expects " + std::to_string(ckpt.model.img_width) +
                    "x" + std::to_string(ckpt.model.img_height));
  const Tensor<float> batch = image.reshaped({1, image.dim(0), image.dim(1), image.dim(2)});
  Tensor<int> mask = predict_labels(model.forward(batch));
  mask.reshape({image.dim(1), image.dim(2)});
  write_png_mask(out, mask);
  std::cout << out.string() << "\n";
  if (!overlay_path.empty()) {
    write_png_rgb(overlay_path, overlay(image, mask));
    std::cout << overlay_path << "\n";
  }
  return 0;
}

int ablate(const fs::path& config, const fs::path& data, const fs::path& out, const std::string& eval_split) {
  const auto [cfg, tc] = load_config(config);
  DataSplit parts = load_split(cfg, tc, data);
  const auto& eval_set = eval_split == "train" ? parts.train : eval_split == "test" ? parts.test : parts.val;
  fs::create_directories(out);
  run_ablation<float>(cfg, tc, parts.train, parts.val, eval_set, [&](const std::vector<AblationRow>& rows) {
    write_json(out / "ablation.json", to_json(rows));
    write_text(out / "ablation.txt", format_ablation_table(rows));
    std::cout << "finished " << rows.back().name << ": DSC " << 100 * rows.back().report.mean_dsc << "\n";
  });
  std::ifstream table(out / "ablation.txt");
  std::cout << table.rdbuf();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"AFFSegNet segmentation toolkit"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "OpenMP threads (0 = runtime default)");

  std::string spec_path;
  fs::path out_dir, data_dir, config_path, ckpt_path, image_path, out_png;
  std::string resume, overlay_path, eval_out, eval_split = "val";
  int n = 8;

  auto* gen = app.add_subcommand("gen-data", "Write synthetic organ/tumor image-mask PNG pairs");
  gen->add_option("--spec", spec_path, "synthetic spec JSON (built-in defaults when omitted)")->check(CLI::ExistingFile);
  gen->add_option("--out", out_dir, "output directory")->required();
  gen->add_option("--n", n, "number of samples")->check(CLI::NonNegativeNumber);

  auto* tr = app.add_subcommand("train", "Train on a directory of PNG pairs");
  tr->add_option("--config", config_path, "config JSON with model and train sections")->required();
  tr->add_option("--data", data_dir, "directory of <id>_img.png / <id>_mask.png")->required();
  tr->add_option("--out", out_dir, "output directory")->required();
  tr->add_option("--resume", resume, "checkpoint to continue from");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a directory of PNG pairs");
  ev->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
  ev->add_option("--data", data_dir, "directory of <id>_img.png / <id>_mask.png")->required();
  ev->add_option("--out", eval_out, "report path (default <ckpt>.eval.json)");

  auto* pr = app.add_subcommand("predict", "Write a predicted label mask for one image");
  pr->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
  pr->add_option("--image", image_path, "input PNG")->required();
  pr->add_option("--out", out_png, "output mask PNG (pixel value = class id)")->required();
  pr->add_option("--overlay", overlay_path, "optional color overlay PNG");

  auto* ab = app.add_subcommand("ablate", "Train the five-row component ablation");
  ab->add_option("--config", config_path, "config JSON with model and train sections")->required();
  ab->add_option("--data", data_dir, "directory of <id>_img.png / <id>_mask.png")->required();
  ab->add_option("--out", out_dir, "output directory")->required();
  ab->add_option("--eval-split", eval_split, "split used for the table")->check(CLI::IsMember({"train", "val", "test"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : kExitUsage;
  }
  if (threads > 0) omp_set_num_threads(threads);

  try {
    if (*gen) return gen_data(spec_path, out_dir, n);
    if (*tr) return train(config_path, data_dir, out_dir, resume);
    if (*ev) return eval(ckpt_path, data_dir, eval_out);
    if (*pr) return predict(ckpt_path, image_path, out_png, overlay_path);
    if (*ab) return ablate(config_path, data_dir, out_dir, eval_split);
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}
