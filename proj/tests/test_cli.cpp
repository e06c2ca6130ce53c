#include "doctest.h"

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>

#include "affseg/training.hpp"
#include "test_support.hpp"

using namespace affseg;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int run(const std::string& args, const fs::path& log = {}) {
  std::string cmd = std::string(AFFSEG_CLI_PATH) + " " + args;
  cmd += log.empty() ? " > /dev/null 2>&1" : " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

SyntheticSpec small_spec(double noise = 0.02) {
  SyntheticSpec s;
  s.height = s.width = 32;
  s.organ.radius_range = {7, 10};
  s.tumor.radius_range = {1.5, 3};
  s.noise_std = noise;
  return s;
}

ModelConfig small_model() {
  ModelConfig cfg;
  cfg.img_height = cfg.img_width = 32;
  cfg.embed_dim = 8;
  cfg.num_heads = {1, 2, 2, 4};
  cfg.window_size = 2;
  return cfg;
}

TrainConfig small_train(int epochs) {
  TrainConfig t;
  t.epochs = epochs;
  t.batch_size = 2;
  return t;
}

// Writes n samples of the small spec through the CLI.
fs::path make_data(const std::string& name, int n, double noise = 0.02) {
  const auto dir = testing::temp_dir(name);
  std::ofstream(dir / "spec.json") << to_json(small_spec(noise)).dump();
  REQUIRE(run("gen-data --spec " + (dir / "spec.json").string() + " --out " + (dir / "data").string() +
              " --n " + std::to_string(n)) == 0);
  return dir;
}

// Hand-set weights that classify every pixel of a noise-free synthetic
// image by its intensity: patch embed and stage-0 blocks carry the raw
// pixels to the finest skip, the last decoder stage passes them through
// with saturated gates, the expansion deconv puts each pixel back in
// place, and the head separates the three intensity levels.
Checkpoint<float> oracle_checkpoint() {
  const auto cfg = small_model();
  AffSegNet<float> model(cfg, 0);
  for (auto& [name, p] : model.params()) p->value.fill(0);
  auto& embed = model.encoder().embed().proj().weight().value;
  for (Index e = 0; e < 4; ++e) embed.at(e, e) = 1;
  auto& stage = model.decoder().stage(2);
  const Index cs = cfg.embed_dim;
  for (Index c = 0; c < 4; ++c) stage.proj1().weight().value.at(cs + c, c) = 1;
  stage.mask_line().bias().value.fill(20);
  stage.asc().fc2().bias().value.fill(20);
  auto& up = model.decoder().expansion()[0].weight().value;  // [in, 2, 2, out]
  for (Index di = 0; di < 2; ++di)
    for (Index dj = 0; dj < 2; ++dj) up.at(di * 2 + dj, di, dj, 0) = 0.5f;
  auto& head = model.decoder().head();
  head.weight().value.at(0, 1) = 10;
  head.bias().value[1] = -3;
  head.weight().value.at(0, 2) = 20;
  head.bias().value[2] = -9.75f;
  Checkpoint<float> ck;
  ck.model = cfg;
  ck.train = small_train(1);
  ck.params = model.state();
  return ck;
}

}  // namespace

TEST_CASE("help and usage errors") {
  CHECK(run("--help") == 0);
  const auto dir = testing::temp_dir("cli_help");
  CHECK(run("train --help", dir / "help.txt") == 0);
  const auto help = slurp(dir / "help.txt");
  for (const char* flag : {"--config", "--data", "--out", "--resume"}) CHECK(help.find(flag) != std::string::npos);
  CHECK(run("gen-data --help", dir / "gen.txt") == 0);
  CHECK(slurp(dir / "gen.txt").find("8") != std::string::npos);
  CHECK(run("gen-data --out /tmp/x --bogus") == 2);
  CHECK(run("ablate --config a --data b --out c --eval-split nope") == 2);
  CHECK(run("") == 2);
}

TEST_CASE("gen-data writes PNG pairs and a manifest, reproducibly") {
  const auto dir = make_data("cli_gen", 8);
  int pngs = 0;
  for (const auto& e : fs::directory_iterator(dir / "data")) pngs += e.path().extension() == ".png";
  CHECK(pngs == 16);
  const auto manifest = read_json(dir / "data" / "manifest.json");
  CHECK(manifest.at("format_version") == 1);
  CHECK(manifest.at("samples").size() == 8);

  REQUIRE(run("gen-data --spec " + (dir / "spec.json").string() + " --out " + (dir / "again").string() + " --n 8") == 0);
  for (const auto& e : fs::directory_iterator(dir / "data"))
    CHECK(slurp(e.path()) == slurp(dir / "again" / e.path().filename()));

  CHECK(run("gen-data --out /proc/affseg_denied --n 2") == 2);
  auto bad = to_json(small_spec());
  bad["noise_std"] = -1;
  std::ofstream(dir / "bad.json") << bad.dump();
  CHECK(run("gen-data --spec " + (dir / "bad.json").string() + " --out " + (dir / "bad").string()) == 2);
}

TEST_CASE("train writes its artifacts and resume continues the epoch count") {
  const auto dir = make_data("cli_train", 6);
  save_config(dir / "c2.json", small_model(), small_train(2));
  REQUIRE(run("train --config " + (dir / "c2.json").string() + " --data " + (dir / "data").string() + " --out " +
              (dir / "run").string()) == 0);
  for (const char* f : {"best.ckpt", "final.ckpt", "metrics_history.json", "config.json"}) CHECK(fs::exists(dir / "run" / f));
  CHECK(read_json(dir / "run" / "metrics_history.json").at("history").size() == 2);

  save_config(dir / "c3.json", small_model(), small_train(3));
  REQUIRE(run("train --config " + (dir / "c3.json").string() + " --data " + (dir / "data").string() + " --out " +
              (dir / "resumed").string() + " --resume " + (dir / "run" / "final.ckpt").string()) == 0);
  const auto hist = read_json(dir / "resumed" / "metrics_history.json").at("history");
  REQUIRE(hist.size() == 3);
  CHECK(hist[2].at("epoch") == 3);

  auto broken = json{{"model", to_json(small_model())}, {"train", to_json(small_train(1))}};
  broken["train"].erase("momentum");
  std::ofstream(dir / "broken.json") << broken.dump();
  CHECK(run("train --config " + (dir / "broken.json").string() + " --data " + (dir / "data").string() + " --out " +
                (dir / "x").string(),
            dir / "err.txt") == 2);
  CHECK(slurp(dir / "err.txt").find("momentum") != std::string::npos);
}

TEST_CASE("non-finite training exits with code 3") {
  const auto dir = make_data("cli_nan", 4);
  auto t = small_train(3);
  t.lr_init = 1e30;
  t.lr_final = 1e29;
  t.momentum = 0;
  save_config(dir / "c.json", small_model(), t);
  CHECK(run("train --config " + (dir / "c.json").string() + " --data " + (dir / "data").string() + " --out " +
            (dir / "run").string()) == 3);
  CHECK(fs::exists(dir / "run" / "last_good.ckpt"));
}

TEST_CASE("eval of a hand-built perfect checkpoint scores 100%") {
  const auto dir = make_data("cli_eval", 4, 0.0);
  save_checkpoint(dir / "oracle.ckpt", oracle_checkpoint());
  REQUIRE(run("eval --ckpt " + (dir / "oracle.ckpt").string() + " --data " + (dir / "data").string(), dir / "out.txt") == 0);
  const auto report = read_json(dir / "oracle.ckpt.eval.json");
  CHECK(report.at("format_version") == 1);
  CHECK(report.at("mean_dsc").get<double>() == 1.0);
  CHECK(report.at("mean_iou").get<double>() == 1.0);
  CHECK(slurp(dir / "out.txt").find("100.00") != std::string::npos);

  auto two = oracle_checkpoint();
  two.model.num_classes = 2;
  AffSegNet<float> m2(two.model, 0);
  two.params = m2.state();
  save_checkpoint(dir / "two.ckpt", two);
  CHECK(run("eval --ckpt " + (dir / "two.ckpt").string() + " --data " + (dir / "data").string()) == 2);
}

TEST_CASE("eval report means equal the mean of per-class entries") {
  const auto dir = make_data("cli_eval_mean", 3);
  Checkpoint<float> ck;
  ck.model = small_model();
  ck.train = small_train(1);
  ck.params = AffSegNet<float>(ck.model, 3).state();
  save_checkpoint(dir / "m.ckpt", ck);
  REQUIRE(run("eval --ckpt " + (dir / "m.ckpt").string() + " --data " + (dir / "data").string() + " --out " +
              (dir / "r.json").string()) == 0);
  const auto r = read_json(dir / "r.json");
  double mean = 0;
  for (const auto& v : r.at("per_class_dsc")) mean += v.get<double>() / r.at("per_class_dsc").size();
  CHECK(r.at("mean_dsc").get<double>() == doctest::Approx(mean).epsilon(1e-12));
}

TEST_CASE("predict writes a label mask of the input size, deterministically") {
  const auto dir = make_data("cli_predict", 2, 0.0);
  save_checkpoint(dir / "oracle.ckpt", oracle_checkpoint());
  const auto image = (dir / "data" / "s00000_img.png").string();
  REQUIRE(run("predict --ckpt " + (dir / "oracle.ckpt").string() + " --image " + image + " --out " +
              (dir / "p1.png").string() + " --overlay " + (dir / "ov.png").string()) == 0);
  REQUIRE(run("predict --ckpt " + (dir / "oracle.ckpt").string() + " --image " + image + " --out " +
              (dir / "p2.png").string()) == 0);
  CHECK(slurp(dir / "p1.png") == slurp(dir / "p2.png"));
  const auto mask = read_png_mask(dir / "p1.png");
  CHECK(mask.shape() == Shape{32, 32});
  for (int v : mask.storage()) CHECK((v >= 0 && v <= 2));
  CHECK(mask == read_png_mask(dir / "data" / "s00000_mask.png"));
  CHECK(read_png_image(dir / "ov.png", 3).shape() == Shape{3, 32, 32});

  write_png_image(dir / "big.png", Tensor<float>({1, 64, 64}));
  CHECK(run("predict --ckpt " + (dir / "oracle.ckpt").string() + " --image " + (dir / "big.png").string() +
            " --out " + (dir / "p3.png").string()) == 2);
}

TEST_CASE("ablate emits five rows as JSON and text") {
  const auto dir = make_data("cli_ablate", 4);
  save_config(dir / "c.json", small_model(), small_train(1));
  REQUIRE(run("ablate --config " + (dir / "c.json").string() + " --data " + (dir / "data").string() + " --out " +
              (dir / "abl").string() + " --eval-split train") == 0);
  const auto j = read_json(dir / "abl" / "ablation.json");
  CHECK(j.at("format_version") == 1);
  REQUIRE(j.at("rows").size() == 5);
  CHECK(j.at("rows")[4].at("name") == "all on");
  const auto text = slurp(dir / "abl" / "ablation.txt");
  CHECK(std::count(text.begin(), text.end(), '\n') == 6);
}
