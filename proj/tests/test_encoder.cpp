#include "doctest.h"

#include <random>

#include "affseg/encoder.hpp"
#include "test_support.hpp"

using namespace affseg;
using testing::random_tensor;

TEST_CASE("patches flatten in channel, row, column order") {
  Tensor<double> image({1, 2, 4, 4});
  for (Index i = 0; i < image.size(); ++i) image[i] = static_cast<double>(i);
  nn::Rng rng(1);
  PatchEmbed<double> embed(2, 2, 8, rng);
  const auto rows = embed.flatten_patches(image);
  CHECK(rows.shape() == Shape{1, 2, 2, 8});
  // patch (0, 1): channel 0 rows 0-1 cols 2-3, then channel 1
  const std::vector<double> want{2, 3, 6, 7, 18, 19, 22, 23};
  for (Index e = 0; e < 8; ++e) CHECK(rows.at(0, 0, 1, e) == want[static_cast<std::size_t>(e)]);
}

TEST_CASE("identity projection makes patch tokens equal the raw patches") {
  nn::Rng rng(2);
  PatchEmbed<double> embed(1, 2, 4, rng);
  auto& w = embed.proj().weight().value;
  w.fill(0);
  for (Index i = 0; i < 4; ++i) w.at(i, i) = 1;
  embed.proj().bias().value.fill(0);
  std::mt19937_64 g(3);
  const auto image = random_tensor<double>({2, 1, 6, 4}, g);
  const auto tokens = embed.forward(image, nullptr);
  CHECK(tokens.shape() == Shape{2, 3, 2, 4});
  for (Index b = 0; b < 2; ++b)
    for (Index i = 0; i < 3; ++i)
      for (Index j = 0; j < 2; ++j)
        for (Index e = 0; e < 4; ++e) CHECK(tokens.at(b, i, j, e) == image.at(b, 0, 2 * i + e / 2, 2 * j + e % 2));
}

TEST_CASE("patch embed sizes and zero behaviour") {
  nn::Rng rng(4);
  PatchEmbed<float> embed(1, 2, 32, rng);
  const auto tokens = embed.forward(Tensor<float>({1, 1, 64, 64}), nullptr);
  CHECK(tokens.dim(1) * tokens.dim(2) == 1024);
  CHECK(tokens == Tensor<float>({1, 32, 32, 32}));  // zero image, zero bias
  CHECK_THROWS_AS(embed.forward(Tensor<float>({1, 1, 63, 64}), nullptr), ShapeError);
  CHECK_THROWS_AS(embed.forward(Tensor<float>({1, 3, 64, 64}), nullptr), ShapeError);
}

TEST_CASE("patch merging concatenates top-left, top-right, bottom-left, bottom-right") {
  Tensor<double> x({1, 2, 2, 2}, std::vector<double>{1, 10, 2, 20, 3, 30, 4, 40});
  CHECK(PatchMerging<double>::gather(x).storage() == std::vector<double>{1, 10, 2, 20, 3, 30, 4, 40});
  Tensor<double> y({1, 4, 4, 1});
  for (Index i = 0; i < 16; ++i) y[i] = static_cast<double>(i);
  const auto gy = PatchMerging<double>::gather(y);
  CHECK(gy.shape() == Shape{1, 2, 2, 4});
  CHECK(std::vector<double>(gy.data() + 4, gy.data() + 8) == std::vector<double>{2, 3, 6, 7});
  CHECK(std::vector<double>(gy.data() + 8, gy.data() + 12) == std::vector<double>{8, 9, 12, 13});
  CHECK(PatchMerging<double>::scatter(gy) == y);
}

TEST_CASE("patch merging shapes") {
  nn::Rng rng(5);
  PatchMerging<float> merge(8, rng);
  CHECK(merge.forward(Tensor<float>({1, 4, 4, 8}), nullptr).shape() == Shape{1, 2, 2, 16});
  CHECK_THROWS_AS(merge.forward(Tensor<float>({1, 3, 4, 8}), nullptr), ShapeError);
  CHECK_FALSE(merge.reduce().has_bias());
}

TEST_CASE("desk encoder emits the bottleneck and three skips") {
  const auto cfg = desk_preset();
  nn::Rng rng(6);
  Encoder<float> enc(cfg, rng);
  std::mt19937_64 g(7);
  const auto out = enc.forward(random_tensor<float>({2, 1, 64, 64}, g, 0, 1), nullptr);
  CHECK(out.bottleneck.shape() == Shape{2, 4, 4, 256});
  CHECK(out.skips[0].shape() == Shape{2, 32, 32, 32});
  CHECK(out.skips[1].shape() == Shape{2, 16, 16, 64});
  CHECK(out.skips[2].shape() == Shape{2, 8, 8, 128});
}

TEST_CASE("encoder with zero parameters maps a zero image to zeros") {
  const auto cfg = desk_preset();
  nn::Rng rng(8);
  Encoder<float> enc(cfg, rng);
  for (auto& [name, p] : testing::params_of(enc, "encoder")) p->value.fill(0);
  const auto out = enc.forward(Tensor<float>({1, 1, 64, 64}), nullptr);
  CHECK(out.bottleneck == Tensor<float>({1, 4, 4, 256}));
  for (int s = 0; s < 3; ++s) CHECK(out.skips[s] == Tensor<float>(out.skips[s].shape()));
}

TEST_CASE("batched encoding equals per-sample encoding") {
  const auto cfg = desk_preset();
  nn::Rng rng(9);
  Encoder<double> enc(cfg, rng);
  std::mt19937_64 g(10);
  const auto a = random_tensor<double>({1, 1, 64, 64}, g, 0, 1), b = random_tensor<double>({1, 1, 64, 64}, g, 0, 1);
  Tensor<double> ab({2, 1, 64, 64});
  std::copy(a.data(), a.data() + a.size(), ab.data());
  std::copy(b.data(), b.data() + b.size(), ab.data() + a.size());
  const auto both = enc.forward(ab, nullptr).bottleneck;
  const auto oa = enc.forward(a, nullptr).bottleneck, ob = enc.forward(b, nullptr).bottleneck;
  double diff = 0;
  for (Index i = 0; i < oa.size(); ++i) {
    diff = std::max(diff, std::abs(both[i] - oa[i]));
    diff = std::max(diff, std::abs(both[oa.size() + i] - ob[i]));
  }
  CHECK(diff < 1e-12);
}

TEST_CASE("encoder blocks carry the EFFN flag") {
  auto cfg = desk_preset();
  cfg.ablation.effn_enabled = false;
  nn::Rng rng(11);
  Encoder<float> enc(cfg, rng);
  for (int s = 0; s < kStages; ++s)
    for (auto& pair : enc.stage(s)) {
      CHECK_FALSE(pair.regular().ffn().enhanced());
      CHECK_FALSE(pair.shifted().ffn().enhanced());
    }
  CHECK(enc.stage(3).size() == 1);
}
