#include "doctest.h"

#include <bit>
#include <random>
#include <set>

#include "affseg/losses.hpp"
#include "affseg/model.hpp"
#include "test_support.hpp"

using namespace affseg;
using testing::random_tensor;

namespace {

// Parameter count derived from the layer definitions, independent of the
// module code.
Index expected_parameters(const ModelConfig& cfg) {
  const Index c = cfg.embed_dim, m = cfg.window_size, p = cfg.patch_size;
  const auto& a = cfg.ablation;
  Index n = cfg.in_channels * p * p * c + c;
  for (int s = 0; s < kStages; ++s) {
    const Index d = c << s, h = cfg.num_heads[static_cast<std::size_t>(s)];
    const Index r = static_cast<Index>(cfg.mlp_ratio * static_cast<double>(d));
    Index block = 2 * d + 3 * d * d + 3 * d + (2 * m - 1) * (2 * m - 1) * h + d * d + d + 2 * d;
    block += d * r + r + r * d + d;
    if (a.effn_enabled) block += 9 * r + r + r * r + r;
    n += cfg.depths[static_cast<std::size_t>(s)] * block;
    if (s < kStages - 1) n += 4 * d * 2 * d;
  }
  for (int i = 0; i < 3; ++i) {
    const Index cin = c << (3 - i), cs = c << (2 - i);
    n += cin * 4 * cs + cs + 2 * cs * cs + cs;
    if (a.mff_enabled) n += 2 * cs + 1;
    if (a.mff_enabled && a.lrd_enabled) n += 3 * (9 * cs * cs + cs);
    if (a.asc_enabled) n += cs * (cs / 4) + cs / 4 + (cs / 4) * cs + cs;
  }
  n += std::countr_zero(static_cast<unsigned>(p)) * (c * 4 * c + c);
  n += c * cfg.num_classes + cfg.num_classes;
  return n;
}

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.img_height = 32;
  cfg.img_width = 32;
  cfg.patch_size = 2;
  cfg.embed_dim = 4;
  cfg.num_heads = {1, 1, 2, 2};
  cfg.window_size = 2;
  cfg.num_classes = 3;
  return cfg;
}

}  // namespace

TEST_CASE("desk preset parameter count is frozen and matches the layer formula") {
  AffSegNet<float> model(desk_preset(), 0);
  CHECK(model.parameter_count() == 5916570);
  CHECK(expected_parameters(desk_preset()) == 5916570);
}

TEST_CASE("all 16 flag combinations build, run, and match the formula") {
  auto cfg = desk_preset();
  const Index all_on = expected_parameters(cfg);
  for (int mask = 0; mask < 16; ++mask) {
    cfg.ablation = {bool(mask & 1), bool(mask & 2), bool(mask & 4), bool(mask & 8)};
    CAPTURE(mask);
    AffSegNet<float> model(cfg, 1);
    CHECK(model.parameter_count() == expected_parameters(cfg));
    if (mask != 15) CHECK(model.parameter_count() < all_on);
    std::mt19937_64 g(2);
    const auto image = random_tensor<float>({1, 1, 64, 64}, g, 0, 1);
    AffSegNet<float>::Cache cache;
    const auto logits = model.forward(image, &cache);
    REQUIRE(logits.shape() == Shape{1, 3, 64, 64});
    Tensor<int> labels({1, 64, 64});
    Tensor<float> grad;
    segmentation_loss(logits, labels, &grad);
    model.zero_grad();
    model.backward(cache, grad);
    for (const auto& [name, p] : model.params()) nn::require_finite(p->grad, name);
  }
}

TEST_CASE("each single-off variant has fewer parameters than the full model") {
  const auto full = AffSegNet<float>(desk_preset(), 0).parameter_count();
  for (int i = 0; i < 4; ++i) {
    auto cfg = desk_preset();
    bool* flags[4] = {&cfg.ablation.effn_enabled, &cfg.ablation.lrd_enabled, &cfg.ablation.mff_enabled,
                      &cfg.ablation.asc_enabled};
    *flags[i] = false;
    CHECK(AffSegNet<float>(cfg, 0).parameter_count() < full);
  }
}

TEST_CASE("every parameter of the full model receives gradient") {
  auto cfg = tiny_config();
  AffSegNet<double> model(cfg, 3);
  std::mt19937_64 g(4);
  testing::scramble(model.params(), g, 0.3);
  const auto image = random_tensor<double>({2, 1, 32, 32}, g, 0, 1);
  AffSegNet<double>::Cache cache;
  const auto logits = model.forward(image, &cache);
  model.zero_grad();
  model.backward(cache, random_tensor<double>(logits.shape(), g));
  for (const auto& [name, p] : model.params()) {
    CAPTURE(name);
    double norm = 0;
    for (double v : p->grad.storage()) norm += v * v;
    CHECK(norm > 0);
  }
}

TEST_CASE("whole-model gradients match finite differences") {
  // A 4x4 grid at the last stage keeps the shifted window from splitting
  // into single-token regions. A near-linear LeakyReLU removes the kinks
  // that tens of thousands of units would otherwise put inside any step.
  auto cfg = tiny_config();
  cfg.img_height = cfg.img_width = 64;
  cfg.leaky_slope = 0.999999;
  AffSegNet<double> model(cfg, 5);
  std::mt19937_64 g(6);
  const auto params = model.params();
  testing::scramble_fan_in(params, g);
  const auto image = random_tensor<double>({1, 1, 64, 64}, g, 0, 1);
  // A random projection of the logits keeps parameter gradients on the
  // scale of the checked value; the loss gradient has its own checks.
  const auto r = random_tensor<double>({1, 3, 64, 64}, g);
  auto loss = [&] { return testing::dot(model.forward(image), r); };
  AffSegNet<double>::Cache cache;
  model.forward(image, &cache);
  model.zero_grad();
  model.backward(cache, r);
  const auto [err, name] = testing::grad_check_params(loss, params, g, 2);
  CAPTURE(name);
  CHECK(err < 1e-6);
}

TEST_CASE("state round-trips and rejects mismatched keys or shapes") {
  AffSegNet<float> a(desk_preset(), 7), b(desk_preset(), 8);
  std::mt19937_64 g(9);
  const auto image = random_tensor<float>({1, 1, 64, 64}, g, 0, 1);
  CHECK_FALSE(a.forward(image) == b.forward(image));
  b.load_state(a.state());
  CHECK(a.forward(image) == b.forward(image));

  auto missing = a.state();
  missing.erase(missing.begin());
  CHECK_THROWS(b.load_state(missing));
  auto wrong = a.state();
  wrong.begin()->second = Tensor<float>({1});
  CHECK_THROWS_AS(b.load_state(wrong), ShapeError);
}

TEST_CASE("parameter names are unique and grouped by encoder and decoder") {
  AffSegNet<float> model(desk_preset(), 0);
  std::set<std::string> names;
  for (const auto& [name, p] : model.params()) {
    CHECK((name.rfind("encoder.", 0) == 0 || name.rfind("decoder.", 0) == 0));
    names.insert(name);
  }
  CHECK(names.size() == model.params().size());
}
