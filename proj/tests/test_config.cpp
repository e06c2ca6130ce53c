#include "doctest.h"

#include <fstream>

#include "affseg/config.hpp"
#include "test_support.hpp"

using namespace affseg;

namespace {

bool mentions(const ValidationResult& r, const std::string& needle) {
  for (const auto& v : r.violations)
    if (v.find(needle) != std::string::npos) return true;
  return false;
}

}  // namespace

TEST_CASE("full-scale preset validates and has the expected stage grid") {
  const auto cfg = full_scale_preset();
  CHECK(validate_config(cfg).ok());
  CHECK(cfg.img_height == 512);
  CHECK(cfg.patch_size == 4);
  CHECK(cfg.window_size == 8);
  CHECK(cfg.embed_dim == 96);
  CHECK(cfg.num_heads == std::array<int, 4>{3, 6, 12, 24});
  for (int s = 0; s < kStages; ++s) {
    CHECK(cfg.stage_height(s) == (128 >> s));
    CHECK(cfg.stage_height(s) % cfg.window_size == 0);
  }
}

TEST_CASE("desk preset validates") {
  const auto cfg = desk_preset();
  CHECK(validate_config(cfg).ok());
  CHECK(cfg.stage_height(3) == 4);
  CHECK(cfg.stage_dim(3) == 256);
}

TEST_CASE("64x64 with patch 4 and window 4 fails at stage 3") {
  ModelConfig cfg = desk_preset();
  cfg.patch_size = 4;
  cfg.window_size = 4;
  const auto r = validate_config(cfg);
  CHECK_FALSE(r.ok());
  CHECK(r.violations.size() == 1);
  CHECK(mentions(r, "stage 3 grid 2x2 not divisible by window_size 4"));
  CHECK_THROWS_AS(require_valid(cfg), ConfigError);
}

TEST_CASE("odd depth is rejected") {
  ModelConfig cfg = desk_preset();
  cfg.depths = {1, 2, 2, 2};
  CHECK(mentions(validate_config(cfg), "depths must be even"));
}

TEST_CASE("validation reports every violation at once") {
  ModelConfig cfg = desk_preset();
  cfg.depths = {1, 2, 3, 2};
  cfg.num_heads[0] = 3;
  cfg.patch_size = 3;
  const auto r = validate_config(cfg);
  CHECK(r.violations.size() >= 4);
  CHECK(mentions(r, "depths[0]"));
  CHECK(mentions(r, "depths[2]"));
  CHECK(mentions(r, "num_heads[0]"));
  CHECK(mentions(r, "power of two"));
}

TEST_CASE("learning rates must satisfy 0 < lr_final < lr_init") {
  TrainConfig t;
  CHECK(validate_train_config(t).ok());
  t.lr_final = t.lr_init;
  CHECK_FALSE(validate_train_config(t).ok());
  t.lr_final = 2 * t.lr_init;
  CHECK(mentions(validate_train_config(t), "lr_final < lr_init"));
}

TEST_CASE("save then load reproduces every field") {
  auto dir = testing::temp_dir("config_roundtrip");
  ModelConfig m = desk_preset();
  m.ablation.lrd_enabled = false;
  m.mlp_ratio = 3.0;
  m.leaky_slope = 0.125;
  TrainConfig t;
  t.seed = 123456789012LL;
  t.lr_init = 0.1 / 3;
  t.augment.rotate_max_deg = 7.5;
  save_config(dir / "c.json", m, t);
  const auto [m2, t2] = load_config(dir / "c.json");
  CHECK(m2 == m);
  CHECK(t2 == t);
}

TEST_CASE("missing field is named in the parse error") {
  auto dir = testing::temp_dir("config_missing");
  auto j = nlohmann::json{{"model", to_json(desk_preset())}, {"train", to_json(TrainConfig{})}};
  j["model"].erase("num_classes");
  std::ofstream(dir / "c.json") << j.dump();
  try {
    load_config(dir / "c.json");
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find("num_classes absent") != std::string::npos);
  }
}

TEST_CASE("unknown key and lr inversion in a file are rejected") {
  auto dir = testing::temp_dir("config_bad");
  auto j = nlohmann::json{{"model", to_json(desk_preset())}, {"train", to_json(TrainConfig{})}};
  auto extra = j;
  extra["model"]["dropout"] = 0.1;
  std::ofstream(dir / "extra.json") << extra.dump();
  CHECK_THROWS_AS(load_config(dir / "extra.json"), ParseError);

  auto lr = j;
  lr["train"]["lr_final"] = 0.5;
  std::ofstream(dir / "lr.json") << lr.dump();
  CHECK_THROWS_AS(load_config(dir / "lr.json"), ConfigError);

  std::ofstream(dir / "broken.json") << "{\"model\": ";
  CHECK_THROWS_AS(load_config(dir / "broken.json"), ParseError);
  CHECK_THROWS_AS(load_config(dir / "absent.json"), ParseError);
}

TEST_CASE("integer fields reject fractional values") {
  auto j = to_json(desk_preset());
  j["patch_size"] = 2.5;
  CHECK_THROWS_AS(model_config_from_json(j), ParseError);
}
