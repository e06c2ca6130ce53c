#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "affseg/data.hpp"
#include "test_support.hpp"

using namespace affseg;
namespace fs = std::filesystem;

namespace {

std::set<int> values(const Tensor<int>& m) { return {m.storage().begin(), m.storage().end()}; }

SegmentationSample blob_sample() {
  SegmentationSample s{Tensor<float>({1, 4, 4}), Tensor<int>({4, 4}), "blob"};
  s.mask.at(1, 2) = 2;
  s.image.at(0, 1, 2) = 1;
  return s;
}

}  // namespace

TEST_CASE("synthetic samples are deterministic per seed and index") {
  SyntheticSpec spec;
  const auto a = generate_synthetic(spec, 4), b = generate_synthetic(spec, 4);
  REQUIRE(a.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(a[i].image == b[i].image);
    CHECK(a[i].mask == b[i].mask);
    CHECK(a[i].id == b[i].id);
  }
  const auto more = generate_synthetic(spec, 6);
  CHECK(more[3].image == a[3].image);
  spec.seed = 1;
  CHECK_FALSE(generate_synthetic(spec, 1)[0].mask == a[0].mask);
}

TEST_CASE("noise-free images are piecewise constant on the mask") {
  SyntheticSpec spec;
  spec.noise_std = 0;
  for (const auto& s : generate_synthetic(spec, 5)) {
    CHECK(s.image.shape() == Shape{1, 64, 64});
    CHECK(values(s.mask) == std::set<int>{0, 1, 2});
    for (Index i = 0; i < s.mask.size(); ++i) CHECK(s.image[i] == kSyntheticIntensity[static_cast<std::size_t>(s.mask[i])]);
  }
}

TEST_CASE("tumors lie strictly inside organs and intensities stay in range") {
  for (const auto& s : generate_synthetic(SyntheticSpec{}, 8)) {
    for (Index i = 0; i < 64; ++i)
      for (Index j = 0; j < 64; ++j) {
        CHECK((s.image.at(0, i, j) >= 0.f && s.image.at(0, i, j) <= 1.f));
        if (s.mask.at(i, j) != 2) continue;
        for (auto [di, dj] : {std::pair{-1, 0}, {1, 0}, {0, -1}, {0, 1}}) {
          const Index ni = i + di, nj = j + dj;
          REQUIRE((ni >= 0 && nj >= 0 && ni < 64 && nj < 64));
          CHECK(s.mask.at(ni, nj) != 0);
        }
      }
  }
}

TEST_CASE("spec validation and impossible placement") {
  SyntheticSpec bad;
  bad.tumor.radius_range = {20, 30};
  bad.noise_std = -1;
  try {
    validate(bad);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("noise_std") != std::string::npos);
    CHECK(msg.find("tumor") != std::string::npos);
  }
  SyntheticSpec huge;
  huge.organ.radius_range = {40, 45};
  CHECK_THROWS_AS(generate_synthetic(huge, 1), DataError);
  const auto j = to_json(SyntheticSpec{});
  CHECK(j.at("format_version") == 1);
  const auto back = synthetic_spec_from_json(j);
  CHECK(to_json(back) == j);
}

TEST_CASE("PNG pairs round-trip through a directory") {
  const auto dir = testing::temp_dir("data_pngs");
  const auto samples = generate_synthetic(SyntheticSpec{}, 3);
  for (const auto& s : samples) save_sample(dir, s);
  const auto loaded = load_directory(dir, 3);
  REQUIRE(loaded.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(loaded[i].id == samples[i].id);
    CHECK(loaded[i].mask == samples[i].mask);
    for (Index p = 0; p < samples[i].image.size(); ++p)
      CHECK(std::abs(loaded[i].image[p] - samples[i].image[p]) <= 0.5f / 255 + 1e-6f);
  }
}

TEST_CASE("orphans and out-of-range mask values are data errors") {
  const auto dir = testing::temp_dir("data_errors");
  auto s = blob_sample();
  save_sample(dir, s);
  fs::copy_file(dir / "blob_mask.png", dir / "lonely_mask.png");
  try {
    load_directory(dir, 3);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("lonely") != std::string::npos);
  }
  fs::remove(dir / "lonely_mask.png");
  CHECK(load_directory(dir, 3).size() == 1);
  s.mask.at(0, 0) = 7;
  save_sample(dir, s);
  CHECK_THROWS_AS(load_directory(dir, 3), DataError);
  CHECK_THROWS_AS(load_directory(testing::temp_dir("data_empty"), 3), DataError);
}

TEST_CASE("flip is an involution and zero rotation is exact") {
  const auto s = generate_synthetic(SyntheticSpec{}, 1)[0];
  const auto f = hflip(s);
  CHECK(f.mask.at(10, 0) == s.mask.at(10, 63));
  CHECK(hflip(f).image == s.image);
  CHECK(hflip(f).mask == s.mask);
  const auto r = rotate(s, 0.0);
  CHECK(r.mask == s.mask);
  CHECK(r.image == s.image);
}

TEST_CASE("quarter turn rotates counter-clockwise about the centre") {
  SegmentationSample s{Tensor<float>({1, 3, 3}), Tensor<int>({3, 3}), "r"};
  s.mask.at(0, 2) = 1;  // top right
  s.image.at(0, 0, 2) = 1;
  const auto r = rotate(s, 90.0);
  CHECK(r.mask.at(0, 0) == 1);  // moves to top left
  CHECK(r.image.at(0, 0, 0) == doctest::Approx(1.0));
  CHECK(values(r.mask) == std::set<int>{0, 1});
}

TEST_CASE("augmentation keeps class ids and is reproducible") {
  const auto s = generate_synthetic(SyntheticSpec{}, 1)[0];
  AugmentConfig cfg{1.0, 15.0};
  std::mt19937_64 a(3), b(3);
  for (int k = 0; k < 5; ++k) {
    const auto x = augment(s, cfg, a), y = augment(s, cfg, b);
    CHECK(x.mask == y.mask);
    CHECK(x.image == y.image);
    for (int v : values(x.mask)) CHECK(values(s.mask).count(v) == 1);
  }
  std::mt19937_64 c(4);
  const auto off = augment(s, AugmentConfig{0.0, 0.0}, c);
  CHECK(off.mask == s.mask);
  CHECK(off.image == s.image);
}

TEST_CASE("resize: identity, nearest 2x blob, class set preserved") {
  const auto s = blob_sample();
  const auto same = resize(s, 4, 4);
  CHECK(same.mask == s.mask);
  CHECK(same.image == s.image);
  const auto up = resize(s, 8, 8);
  CHECK(up.mask.shape() == Shape{8, 8});
  for (Index i = 0; i < 8; ++i)
    for (Index j = 0; j < 8; ++j) CHECK(up.mask.at(i, j) == ((i / 2 == 1 && j / 2 == 2) ? 2 : 0));
  CHECK(values(up.mask) == values(s.mask));
  CHECK(up.image.at(0, 2, 4) == doctest::Approx(0.5625));  // half-pixel bilinear
}

TEST_CASE("split sizes, minimum rule and determinism") {
  std::vector<SegmentationSample> samples(100);
  for (int i = 0; i < 100; ++i) samples[static_cast<std::size_t>(i)].id = "s" + std::to_string(1000 + i);
  const auto a = split(samples, 7);
  CHECK(a.train.size() == 80);
  CHECK(a.val.size() == 15);
  CHECK(a.test.size() == 5);
  std::set<std::string> ids;
  for (const auto* part : {&a.train, &a.val, &a.test})
    for (const auto& s : *part) ids.insert(s.id);
  CHECK(ids.size() == 100);
  const auto b = split(samples, 7);
  for (std::size_t i = 0; i < 15; ++i) CHECK(a.val[i].id == b.val[i].id);
  const auto c = split(samples, 8);
  bool differs = false;
  for (std::size_t i = 0; i < 15; ++i) differs |= a.val[i].id != c.val[i].id;
  CHECK(differs);

  const auto three = split(std::vector<SegmentationSample>(samples.begin(), samples.begin() + 3), 0);
  CHECK(three.train.size() == 1);
  CHECK(three.val.size() == 1);
  CHECK(three.test.size() == 1);
  CHECK_FALSE(three.warnings.empty());
  CHECK_THROWS_AS(split(std::vector<SegmentationSample>(samples.begin(), samples.begin() + 2), 0), DataError);
}

TEST_CASE("batches stack images and labels; incompatible data is rejected") {
  const auto samples = generate_synthetic(SyntheticSpec{}, 3);
  const auto batch = make_batch<float>(samples, {2, 0});
  CHECK(batch.images.shape() == Shape{2, 1, 64, 64});
  CHECK(batch.labels.shape() == Shape{2, 64, 64});
  CHECK(batch.images.at(0, 0, 5, 7) == samples[2].image.at(0, 5, 7));
  CHECK(batch.labels.at(1, 9, 9) == samples[0].mask.at(9, 9));
  auto cfg = desk_preset();
  CHECK_NOTHROW(check_compatible(samples, cfg));
  cfg.num_classes = 2;
  CHECK_THROWS_AS(check_compatible(samples, cfg), DataError);
  cfg = desk_preset();
  cfg.img_height = 128;
  CHECK_THROWS_AS(check_compatible(samples, cfg), DataError);
}

TEST_CASE("derived seeds separate streams") {
  CHECK(derive_seed(1, 2, 3) == derive_seed(1, 2, 3));
  CHECK(derive_seed(1, 2, 3) != derive_seed(1, 3, 2));
  CHECK(derive_seed(1, 2, std::string("a")) != derive_seed(1, 2, std::string("b")));
}
