#include "doctest.h"

#include <cmath>
#include <random>

#include "affseg/losses.hpp"
#include "affseg/metrics.hpp"
#include "test_support.hpp"

using namespace affseg;
using testing::random_tensor;

namespace {

double logit(double p) { return std::log(p / (1 - p)); }

Tensor<double> constant(Shape s, double v) { return Tensor<double>(std::move(s), v); }

Tensor<int> grid(Index h, Index w, std::vector<int> v) { return Tensor<int>({h, w}, std::move(v)); }

}  // namespace

TEST_CASE("constant y = 1, p = 0.99 with no smoothing") {
  const auto lv = bce_dice_loss<double>(constant({1, 1, 4, 4}, logit(0.99)), constant({1, 1, 4, 4}, 1.0), nullptr, 0.0);
  CHECK(lv.dice_term == doctest::Approx(1 - 1.98 / 1.99).epsilon(1e-9));
  CHECK(lv.bce_term == doctest::Approx(-std::log(0.99)).epsilon(1e-9));
  CHECK(lv.total == doctest::Approx(0.015075).epsilon(1e-4));
  CHECK(lv.dice_term == doctest::Approx(0.005025).epsilon(1e-3));
  CHECK(lv.bce_term == doctest::Approx(0.010050).epsilon(1e-3));
}

TEST_CASE("perfect negative prediction costs almost nothing") {
  const auto lv = bce_dice_loss<double>(constant({2, 1, 8, 8}, -20.0), constant({2, 1, 8, 8}, 0.0));
  // Dice term with empty target: 1 - eps / (sum p + eps), sum p = 64 * sigmoid(-20)
  const double sp = 64 / (1 + std::exp(20.0));
  CHECK(lv.dice_term == doctest::Approx(1 - kDiceSmoothing / (sp + kDiceSmoothing)).epsilon(1e-9));
  CHECK(lv.bce_term < 1e-6 + 1e-12);
}

TEST_CASE("loss falls as p moves toward the target") {
  std::mt19937_64 g(1);
  Tensor<double> y({2, 1, 8, 8});
  for (auto& v : y.storage()) v = double(g() % 2);
  double prev = 1e9;
  for (double p : {0.5, 0.7, 0.9, 0.99}) {
    Tensor<double> z(y.shape());
    for (Index i = 0; i < z.size(); ++i) z[i] = y[i] > 0.5 ? logit(p) : logit(1 - p);
    const double total = bce_dice_loss(z, y).total;
    CHECK(total < prev);
    prev = total;
  }
}

TEST_CASE("binary targets outside {0, 1} are rejected") {
  auto y = constant({1, 1, 2, 2}, 1.0);
  y[2] = 0.5;
  CHECK_THROWS_AS(bce_dice_loss(constant({1, 1, 2, 2}, 0.0), y), DataError);
  CHECK_THROWS_AS(bce_dice_loss(constant({1, 2, 2, 2}, 0.0), constant({1, 2, 2, 2}, 1.0)), ShapeError);
}

TEST_CASE("stable logit form survives extreme logits") {
  Tensor<double> z({1, 1, 1, 2}, std::vector<double>{800, -800});
  Tensor<double> y({1, 1, 1, 2}, std::vector<double>{0, 1});
  const auto lv = bce_dice_loss(z, y);
  CHECK(std::isfinite(lv.total));
  CHECK(lv.bce_term == doctest::Approx(800.0));
}

TEST_CASE("two-class softmax loss equals the sigmoid loss") {
  std::mt19937_64 g(2);
  const auto z = random_tensor<double>({2, 1, 5, 5}, g, -3, 3);
  Tensor<int> labels({2, 5, 5});
  Tensor<double> y({2, 1, 5, 5});
  for (Index i = 0; i < labels.size(); ++i) y[i] = labels[i] = static_cast<int>(g() % 2);
  Tensor<double> z2({2, 2, 5, 5});
  for (Index b = 0; b < 2; ++b)
    for (Index p = 0; p < 25; ++p) z2[(b * 2 + 1) * 25 + p] = z[b * 25 + p];
  const auto bin = bce_dice_loss(z, y), multi = bce_dice_loss_multiclass(z2, labels);
  CHECK(multi.total == doctest::Approx(bin.total).epsilon(1e-12));
  CHECK(multi.dice_term == doctest::Approx(bin.dice_term).epsilon(1e-12));
  CHECK(multi.bce_term == doctest::Approx(bin.bce_term).epsilon(1e-12));
}

TEST_CASE("multiclass: uniform logits give ln 2, one-hot logits near zero") {
  Tensor<int> labels({1, 4, 4});
  for (Index i = 0; i < 8; ++i) labels[i] = 1;
  CHECK(bce_dice_loss_multiclass(constant({1, 2, 4, 4}, 0.0), labels).bce_term == doctest::Approx(std::log(2.0)));
  Tensor<int> three({1, 4, 4});
  for (Index i = 0; i < 16; ++i) three[i] = static_cast<int>(i % 3);
  Tensor<double> z({1, 3, 4, 4});
  for (Index i = 0; i < 16; ++i) z[three[i] * 16 + i] = 20;
  CHECK(bce_dice_loss_multiclass(z, three).total < 1e-3);
  three[5] = 3;
  CHECK_THROWS_AS(bce_dice_loss_multiclass(z, three), DataError);
}

TEST_CASE("loss gradients match finite differences") {
  std::mt19937_64 g(3);
  SUBCASE("binary") {
    auto z = random_tensor<double>({2, 1, 6, 6}, g, -2, 2);
    Tensor<double> y(z.shape());
    for (auto& v : y.storage()) v = double(g() % 2);
    Tensor<double> grad;
    bce_dice_loss(z, y, &grad);
    CHECK(testing::grad_check([&] { return bce_dice_loss(z, y).total; }, z, grad, g, 8) < 1e-6);
  }
  SUBCASE("multiclass") {
    auto z = random_tensor<double>({2, 3, 5, 5}, g, -2, 2);
    Tensor<int> labels({2, 5, 5});
    for (auto& v : labels.storage()) v = static_cast<int>(g() % 3);
    Tensor<double> grad;
    bce_dice_loss_multiclass(z, labels, &grad);
    CHECK(testing::grad_check([&] { return bce_dice_loss_multiclass(z, labels).total; }, z, grad, g, 8) < 1e-6);
  }
}

TEST_CASE("segmentation_loss dispatches on the channel count") {
  std::mt19937_64 g(4);
  const auto z1 = random_tensor<double>({1, 1, 3, 3}, g);
  Tensor<int> labels({1, 3, 3});
  for (auto& v : labels.storage()) v = static_cast<int>(g() % 2);
  Tensor<double> y(z1.shape());
  for (Index i = 0; i < y.size(); ++i) y[i] = labels[i];
  CHECK(segmentation_loss(z1, labels).total == bce_dice_loss(z1, y).total);
  const auto z3 = random_tensor<double>({1, 3, 3, 3}, g);
  CHECK(segmentation_loss(z3, labels).total == bce_dice_loss_multiclass(z3, labels).total);
}

TEST_CASE("2x2 hand example: DSC 1/2, IoU 1/3") {
  const auto gt = grid(2, 2, {1, 1, 0, 0}), pred = grid(2, 2, {1, 0, 1, 0});
  CHECK(dsc(pred, gt, 1) == 0.5);
  CHECK(iou(pred, gt, 1) == doctest::Approx(1.0 / 3));
  CHECK(iou(pred, gt, 0) == doctest::Approx(1.0 / 3));
  CHECK(miou(pred, gt, {0, 1}) == doctest::Approx(1.0 / 3));
}

TEST_CASE("metric edge cases") {
  const auto a = grid(2, 2, {1, 1, 0, 0}), b = grid(2, 2, {0, 0, 1, 1}), z = grid(2, 2, {0, 0, 0, 0});
  CHECK(dsc(a, a, 1) == 1.0);
  CHECK(miou(a, a, {0, 1}) == 1.0);
  CHECK(dsc(a, b, 1) == 0.0);
  CHECK(iou(a, b, 1) == 0.0);
  CHECK(dsc(z, z, 1) == 1.0);
  CHECK(iou(z, z, 1) == 1.0);
  CHECK_THROWS_AS(dsc(a, grid(1, 4, {0, 0, 0, 0}), 1), ShapeError);
}

TEST_CASE("prediction picks the argmax, or the positive logit for one channel") {
  Tensor<double> z({1, 3, 1, 2}, std::vector<double>{0.1, 5, 0.3, -1, 0.2, 2});
  CHECK(predict_labels(z).storage() == std::vector<int>{1, 0});
  Tensor<double> z1({1, 1, 1, 3}, std::vector<double>{-0.5, 0.5, 3});
  CHECK(predict_labels(z1).storage() == std::vector<int>{0, 1, 1});
}

TEST_CASE("accumulator averages per-image scores and reports consistent means") {
  MetricsAccumulator acc(foreground_classes(3));
  const auto gt = grid(2, 2, {1, 1, 2, 0}), pred = grid(2, 2, {1, 0, 2, 2});
  acc.add(gt, gt);
  acc.add(pred, gt);
  const auto r = acc.report();
  CHECK(acc.images() == 2);
  CHECK(r.class_names == std::vector<std::string>{"class_1", "class_2"});
  CHECK(r.per_class_dsc[0] == doctest::Approx((1.0 + 2.0 / 3) / 2));
  CHECK(r.per_class_dsc[1] == doctest::Approx((1.0 + 2.0 / 3) / 2));
  CHECK(r.per_class_iou[0] == doctest::Approx((1.0 + 0.5) / 2));
  CHECK(r.mean_dsc == doctest::Approx((r.per_class_dsc[0] + r.per_class_dsc[1]) / 2));
  CHECK(r.mean_iou == doctest::Approx((r.per_class_iou[0] + r.per_class_iou[1]) / 2));
  CHECK(foreground_classes(1) == std::vector<int>{1});
  CHECK(foreground_classes(2) == std::vector<int>{1});
}

TEST_CASE("report JSON round-trips and the table prints two decimals") {
  MetricsReport r{{"organ", "tumor"}, {0.5, 0.25}, {1.0 / 3, 0.125}, 0.375, 0.2291666};
  const auto j = to_json(r);
  CHECK(j.at("format_version") == 1);
  const auto back = metrics_report_from_json(j);
  CHECK(back.class_names == r.class_names);
  CHECK(back.per_class_dsc == r.per_class_dsc);
  CHECK(back.mean_iou == r.mean_iou);
  const auto table = format_table(r);
  CHECK(table.find("50.00") != std::string::npos);
  CHECK(table.find("33.33") != std::string::npos);
  CHECK(table.find("average") != std::string::npos);
}
