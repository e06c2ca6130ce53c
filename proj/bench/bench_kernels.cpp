// Serial reference kernels against the Eigen/OpenMP kernels at desk-preset shapes.

#include <random>
#include <vector>

#include <benchmark/benchmark.h>

#include "affseg/kernels/kernels.hpp"

namespace k = affseg::kernels;
using affseg::Index;

namespace {

std::vector<float> random_vec(Index n, unsigned seed) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<float> dist(-1, 1);
  std::vector<float> v(static_cast<std::size_t>(n));
  for (auto& e : v) e = dist(rng);
  return v;
}

// Token projection of a 32x32 grid, batch 2: [2048, 32] x [32, 96].
template <bool Parallel>
void BM_Gemm(benchmark::State& state) {
  const Index m = 2048, n = 96, kk = 32;
  const auto a = random_vec(m * kk, 1), b = random_vec(kk * n, 2);
  std::vector<float> c(static_cast<std::size_t>(m * n));
  for (auto _ : state) {
    if constexpr (Parallel) k::gemm(k::Trans::No, k::Trans::No, m, n, kk, 1.f, a.data(), b.data(), 0.f, c.data());
    else k::reference::gemm(k::Trans::No, k::Trans::No, m, n, kk, 1.f, a.data(), b.data(), 0.f, c.data());
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * 2 * m * n * kk);
}

// Dilated 3x3 convolution of the finest decoder stage.
template <bool Parallel>
void BM_Conv2d(benchmark::State& state) {
  k::ConvGeometry g{2, 32, 32, 32, 32, 3, state.range(0)};
  const auto x = random_vec(g.pixels() * g.in_channels, 3), w = random_vec(g.patch() * g.out_channels, 4);
  const auto bias = random_vec(g.out_channels, 5);
  std::vector<float> y(static_cast<std::size_t>(g.pixels() * g.out_channels));
  for (auto _ : state) {
    if constexpr (Parallel) k::conv2d_forward(g, x.data(), w.data(), bias.data(), y.data());
    else k::reference::conv2d_forward(g, x.data(), w.data(), bias.data(), y.data());
    benchmark::DoNotOptimize(y.data());
  }
}

template <bool Parallel>
void BM_Conv2dBackward(benchmark::State& state) {
  k::ConvGeometry g{2, 32, 32, 32, 32, 3, 2};
  const auto x = random_vec(g.pixels() * g.in_channels, 3), w = random_vec(g.patch() * g.out_channels, 4);
  const auto gy = random_vec(g.pixels() * g.out_channels, 6);
  std::vector<float> gx(x.size()), gw(w.size()), gb(static_cast<std::size_t>(g.out_channels));
  for (auto _ : state) {
    if constexpr (Parallel) k::conv2d_backward(g, x.data(), w.data(), gy.data(), gx.data(), gw.data(), gb.data());
    else k::reference::conv2d_backward(g, x.data(), w.data(), gy.data(), gx.data(), gw.data(), gb.data());
    benchmark::DoNotOptimize(gw.data());
  }
}

// EFFN depthwise convolution on the stage-0 hidden width.
template <bool Parallel>
void BM_Depthwise(benchmark::State& state) {
  const Index b = 2, h = 32, w = 32, c = 128;
  const auto x = random_vec(b * h * w * c, 7), wt = random_vec(9 * c, 8), bias = random_vec(c, 9);
  std::vector<float> y(x.size());
  for (auto _ : state) {
    if constexpr (Parallel) k::depthwise3x3_forward(b, h, w, c, x.data(), wt.data(), bias.data(), y.data());
    else k::reference::depthwise3x3_forward(b, h, w, c, x.data(), wt.data(), bias.data(), y.data());
    benchmark::DoNotOptimize(y.data());
  }
}

// Stage-0 shifted window attention: 64 windows per image, batch 2.
template <bool Parallel>
void BM_Attention(benchmark::State& state) {
  k::AttentionGeometry g{128, 2, 16, 16, 64};
  const Index qn = g.windows * g.heads * g.tokens * g.head_dim;
  const auto q = random_vec(qn, 10), kk = random_vec(qn, 11), v = random_vec(qn, 12);
  const auto bias = random_vec(g.heads * g.tokens * g.tokens, 13);
  const std::vector<float> mask(static_cast<std::size_t>(g.mask_windows * g.tokens * g.tokens), 0.f);
  std::vector<float> probs(static_cast<std::size_t>(g.windows * g.heads * g.tokens * g.tokens)), out(q.size());
  for (auto _ : state) {
    if constexpr (Parallel)
      k::window_attention_forward(g, q.data(), kk.data(), v.data(), bias.data(), mask.data(), 0.25f, probs.data(),
                                  out.data());
    else
      k::reference::window_attention_forward(g, q.data(), kk.data(), v.data(), bias.data(), mask.data(), 0.25f,
                                             probs.data(), out.data());
    benchmark::DoNotOptimize(out.data());
  }
}

template <bool Parallel>
void BM_LayerNorm(benchmark::State& state) {
  const Index rows = 2048, cols = 32;
  const auto x = random_vec(rows * cols, 14), gamma = random_vec(cols, 15), beta = random_vec(cols, 16);
  std::vector<float> y(x.size()), xhat(x.size()), rstd(static_cast<std::size_t>(rows));
  for (auto _ : state) {
    if constexpr (Parallel)
      k::layer_norm_forward(rows, cols, x.data(), gamma.data(), beta.data(), 1e-5f, y.data(), xhat.data(), rstd.data());
    else
      k::reference::layer_norm_forward(rows, cols, x.data(), gamma.data(), beta.data(), 1e-5f, y.data(), xhat.data(),
                                       rstd.data());
    benchmark::DoNotOptimize(y.data());
  }
}

}  // namespace

BENCHMARK(BM_Gemm<false>)->Name("gemm/reference");
BENCHMARK(BM_Gemm<true>)->Name("gemm/parallel");
BENCHMARK(BM_Conv2d<false>)->Name("conv2d/reference")->Arg(1)->Arg(4);
BENCHMARK(BM_Conv2d<true>)->Name("conv2d/parallel")->Arg(1)->Arg(4);
BENCHMARK(BM_Conv2dBackward<false>)->Name("conv2d_backward/reference");
BENCHMARK(BM_Conv2dBackward<true>)->Name("conv2d_backward/parallel");
BENCHMARK(BM_Depthwise<false>)->Name("depthwise3x3/reference");
BENCHMARK(BM_Depthwise<true>)->Name("depthwise3x3/parallel");
BENCHMARK(BM_Attention<false>)->Name("window_attention/reference");
BENCHMARK(BM_Attention<true>)->Name("window_attention/parallel");
BENCHMARK(BM_LayerNorm<false>)->Name("layer_norm/reference");
BENCHMARK(BM_LayerNorm<true>)->Name("layer_norm/parallel");

BENCHMARK_MAIN();
