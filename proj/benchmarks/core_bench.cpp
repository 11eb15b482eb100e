#include <benchmark/benchmark.h>

#include <random>

#include "dinocell/autograd.hpp"
#include "dinocell/dino.hpp"
#include "dinocell/metrics.hpp"
#include "dinocell/ops.hpp"
#include "dinocell/vit.hpp"

namespace {

using namespace dinocell;

std::vector<float> noise(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> g(0.0f, 1.0f);
  std::vector<float> v(n);
  for (auto& x : v) x = g(rng);
  return v;
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  auto a = Tensor::from({n, n}, noise(n * n, 1));
  auto b = Tensor::from({n, n}, noise(n * n, 2));
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(ops::matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(256);

void BM_Attention(benchmark::State& state) {
  const std::size_t batch = 16, tokens = static_cast<std::size_t>(state.range(0)), d = 64;
  auto qkv = Tensor::from({batch, tokens, 3 * d}, noise(batch * tokens * 3 * d, 3));
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(ops::multi_head_attention(qkv, 4));
}
BENCHMARK(BM_Attention)->Arg(37)->Arg(145);

void BM_AttentionBackward(benchmark::State& state) {
  const std::size_t batch = 16, tokens = 37, d = 64;
  auto qkv = Tensor::parameter({batch, tokens, 3 * d}, noise(batch * tokens * 3 * d, 4));
  for (auto _ : state) {
    auto loss = ops::mean(ops::multi_head_attention(qkv, 4));
    benchmark::DoNotOptimize(backward(loss));
  }
}
BENCHMARK(BM_AttentionBackward);

void BM_VitForward(benchmark::State& state) {
  const auto px = static_cast<std::size_t>(state.range(0));
  ViTConfig cfg{.image_size = px, .patch_size = 8, .in_channels = 2, .embed_dim = 64, .depth = 4, .num_heads = 4};
  auto params = init_vit(cfg);
  auto batch = Tensor::from({16, 2, px, px}, noise(16 * 2 * px * px, 5));
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(forward_features(params, batch));
  state.SetItemsProcessed(state.iterations() * 16);
}
BENCHMARK(BM_VitForward)->Arg(48)->Arg(96)->Unit(benchmark::kMillisecond);

void BM_MacroF1(benchmark::State& state) {
  std::mt19937_64 rng(6);
  std::bernoulli_distribution b(0.3);
  std::vector<LabelVector> t(512, LabelVector(17)), p(512, LabelVector(17));
  for (auto& r : t) for (auto& v : r) v = b(rng);
  for (auto& r : p) for (auto& v : r) v = b(rng);
  for (auto _ : state) benchmark::DoNotOptimize(macro_f1(t, p));
}
BENCHMARK(BM_MacroF1);

}  // namespace
BENCHMARK_MAIN();
