#include "doctest.h"

#include <random>
#include <set>

#include "affseg/window_attention.hpp"
#include "test_support.hpp"

using namespace affseg;
using testing::random_tensor;

TEST_CASE("partition of an 8x8 map with M=4 tiles in row-major order") {
  std::mt19937_64 rng(1);
  const auto x = random_tensor<float>({1, 8, 8, 3}, rng);
  const auto w = window_partition(x, 4);
  CHECK(w.shape() == Shape{4, 4, 4, 3});
  for (Index t = 0; t < 4; ++t)
    for (Index i = 0; i < 4; ++i)
      for (Index j = 0; j < 4; ++j)
        for (Index c = 0; c < 3; ++c) CHECK(w.at(t, i, j, c) == x.at(0, (t / 2) * 4 + i, (t % 2) * 4 + j, c));
}

TEST_CASE("partition with one window is the input plus a window axis") {
  std::mt19937_64 rng(2);
  const auto x = random_tensor<float>({2, 4, 4, 5}, rng);
  const auto w = window_partition(x, 4);
  CHECK(w.shape() == Shape{2, 4, 4, 5});
  CHECK(w.storage() == x.storage());
}

TEST_CASE("reverse inverts partition and rejects inconsistent counts") {
  std::mt19937_64 rng(3);
  const auto x = random_tensor<double>({3, 12, 8, 2}, rng);
  CHECK(window_reverse(window_partition(x, 4), 4, 12, 8) == x);
  CHECK(window_reverse(Tensor<double>({6, 4, 4, 2}), 4, 12, 8) == Tensor<double>({1, 12, 8, 2}));
  CHECK_THROWS_AS(window_reverse(Tensor<double>({5, 4, 4, 2}), 4, 12, 8), ShapeError);
  CHECK_THROWS_AS(window_partition(Tensor<double>({1, 6, 8, 2}), 4), ShapeError);
}

TEST_CASE("cyclic shift rolls like the column example") {
  Tensor<int> col({1, 4, 1, 1}, std::vector<int>{1, 2, 3, 4});
  CHECK(cyclic_shift(col, -1, 0).storage() == std::vector<int>{2, 3, 4, 1});
  CHECK(cyclic_shift(col, 1, 0).storage() == std::vector<int>{4, 1, 2, 3});
  CHECK(cyclic_shift(col, 0, 0) == col);
  std::mt19937_64 rng(4);
  const auto x = random_tensor<double>({2, 6, 4, 3}, rng);
  CHECK(cyclic_shift(cyclic_shift(x, -2, 3), 2, -3) == x);
}

TEST_CASE("relative position index values") {
  CHECK(relative_position_index(1).storage() == std::vector<int>{0});
  const auto idx = relative_position_index(2);
  CHECK(idx.shape() == Shape{4, 4});
  for (Index i = 0; i < 4; ++i) CHECK(idx.at(i, i) == 4);
  CHECK(idx.at(0, 3) == 0);
  CHECK(idx.at(3, 0) == 8);
  for (Index m : {2, 3, 5}) {
    const auto t = relative_position_index(m);
    const int centre = static_cast<int>((m - 1) * (2 * m - 1) + (m - 1));
    std::set<int> used;
    for (Index i = 0; i < m * m; ++i)
      for (Index j = 0; j < m * m; ++j) {
        CHECK(t.at(i, j) + t.at(j, i) == 2 * centre);
        const int dh = static_cast<int>(i / m - j / m), dw = static_cast<int>(i % m - j % m);
        CHECK(t.at(i, j) == (dh + m - 1) * (2 * m - 1) + (dw + m - 1));
        used.insert(t.at(i, j));
      }
    CHECK(used.size() == static_cast<std::size_t>((2 * m - 1) * (2 * m - 1)));
  }
}

TEST_CASE("mask is zero without shift, symmetric, and matches wrap regions") {
  CHECK(build_attention_mask<float>(8, 8, 4, 0) == Tensor<float>({4, 16, 16}));
  for (auto [h, w, m] : {std::array<Index, 3>{8, 8, 4}, {4, 4, 4}, {12, 8, 4}, {6, 6, 2}}) {
    const Index s = m / 2, n = m * m;
    const auto mask = build_attention_mask<double>(h, w, m, s);
    const Index cols = w / m;
    for (Index win = 0; win < mask.dim(0); ++win)
      for (Index q = 0; q < n; ++q)
        for (Index k = 0; k < n; ++k) {
          CHECK(mask.at(win, q, k) == mask.at(win, k, q));
          const Index qi = (win / cols) * m + q / m, qj = (win % cols) * m + q % m;
          const Index ki = (win / cols) * m + k / m, kj = (win % cols) * m + k % m;
          const bool same = testing::wrap_region(qi, qj, h, w, s) == testing::wrap_region(ki, kj, h, w, s);
          CHECK(mask.at(win, q, k) == (same ? 0.0 : kMaskNeg));
        }
  }
}

TEST_CASE("zero queries and bias give the mean of V") {
  std::mt19937_64 rng(5);
  const Tensor<double> q({3, 2, 9, 4});
  const auto k = random_tensor<double>({3, 2, 9, 4}, rng), v = random_tensor<double>({3, 2, 9, 4}, rng);
  RelativePositionBias<double> bias(3, 2);
  const auto out = window_attention<double>(q, k, v, bias, nullptr, nullptr);
  for (Index w = 0; w < 3; ++w)
    for (Index h = 0; h < 2; ++h)
      for (Index e = 0; e < 4; ++e) {
        double mean = 0;
        for (Index t = 0; t < 9; ++t) mean += v.at(w, h, t, e) / 9;
        for (Index t = 0; t < 9; ++t) CHECK(out.at(w, h, t, e) == doctest::Approx(mean).epsilon(1e-12));
      }
}

TEST_CASE("single-token windows return V exactly") {
  std::mt19937_64 rng(6);
  const auto q = random_tensor<float>({5, 3, 1, 2}, rng), k = random_tensor<float>({5, 3, 1, 2}, rng);
  const auto v = random_tensor<float>({5, 3, 1, 2}, rng);
  nn::Rng r(1);
  RelativePositionBias<float> bias(1, 3, r);
  CHECK(window_attention<float>(q, k, v, bias, nullptr, nullptr) == v);
}

TEST_CASE("non-finite attention inputs raise NumericError") {
  Tensor<double> q({1, 1, 4, 2});
  q[3] = std::nan("");
  RelativePositionBias<double> bias(2, 1);
  CHECK_THROWS_AS(window_attention<double>(q, q, q, bias, nullptr, nullptr), NumericError);
}

TEST_CASE("window attention module equals the brute-force oracle") {
  for (Index shift : {0, 2}) {
    CAPTURE(shift);
    nn::Rng rng(7 + shift);
    WindowAttention<double> attn(8, 2, 4, shift, 8, 12, rng);
    std::mt19937_64 g(8);
    testing::scramble(testing::params_of(attn), g, 0.5);
    const auto x = random_tensor<double>({2, 8, 12, 8}, g);
    const auto got = attn.forward(x, nullptr);
    const auto want = testing::oracle_window_module(x, attn.qkv().weight().value, attn.qkv().bias().value,
                                                    attn.proj().weight().value, attn.proj().bias().value,
                                                    attn.bias().table.value, 2, 4, shift);
    CHECK(testing::max_abs_diff(got, want) < 1e-12);
  }
}

TEST_CASE("window attention gradients match finite differences") {
  nn::Rng rng(9);
  WindowAttention<double> attn(8, 2, 4, 2, 8, 8, rng);
  std::mt19937_64 g(10);
  const auto params = testing::params_of(attn);
  testing::scramble(params, g, 0.5);
  auto x = random_tensor<double>({1, 8, 8, 8}, g);
  const auto r = random_tensor<double>({1, 8, 8, 8}, g);
  auto loss = [&] { return testing::dot(attn.forward(x, nullptr), r); };
  WindowAttention<double>::Cache cache;
  attn.forward(x, &cache);
  testing::zero_grads(params);
  const auto gx = attn.backward(cache, r);
  CHECK(testing::grad_check(loss, x, gx, g) < 1e-6);
  const auto [err, name] = testing::grad_check_params(loss, params, g);
  CAPTURE(name);
  CHECK(err < 1e-6);
}
