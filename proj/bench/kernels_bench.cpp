// OpenMP kernels against the serial reference. Run with
// --benchmark_filter=... to pick one; the thread count is the second arg.
// Wall time is reported since CPU time only covers the calling thread.

#include <random>

#include <benchmark/benchmark.h>

#include "rine/kernels.hpp"
#include "rine/vit.hpp"

namespace k = rine::kernels;
namespace ref = rine::reference;
using rine::Tensor;

namespace {

Tensor random(const rine::Shape& shape, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  Tensor t(shape);
  for (auto& v : t.values()) v = u(gen);
  return t;
}

void threads_from(const benchmark::State& state) { k::set_num_threads(static_cast<int>(state.range(1))); }

void BM_MatmulParallel(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  threads_from(state);
  const auto a = random({n, n}, 1), b = random({n, n}, 2);
  for (auto _ : state) benchmark::DoNotOptimize(k::matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}

void BM_MatmulReference(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random({n, n}, 1), b = random({n, n}, 2);
  for (auto _ : state) benchmark::DoNotOptimize(ref::matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}

void BM_SoftmaxParallel(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  threads_from(state);
  const auto x = random({n, n}, 3);
  for (auto _ : state) benchmark::DoNotOptimize(k::softmax(x, 1));
}

void BM_SoftmaxReference(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto x = random({n, n}, 3);
  for (auto _ : state) benchmark::DoNotOptimize(ref::softmax(x, 1));
}

void BM_LayerNormParallel(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  threads_from(state);
  const auto x = random({n, 1024}, 4), g = random({1024}, 5), b = random({1024}, 6);
  for (auto _ : state) benchmark::DoNotOptimize(k::layer_norm(x, g, b));
}

void BM_LayerNormReference(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto x = random({n, 1024}, 4), g = random({1024}, 5), b = random({1024}, 6);
  for (auto _ : state) benchmark::DoNotOptimize(ref::layer_norm(x, g, b));
}

// ViT-L/14-sized attention rows for a small batch: 257 tokens, 16 heads.
constexpr std::size_t kTokens = 257, kWidth = 1024, kHeads = 16;

void BM_AttentionParallel(benchmark::State& state) {
  const auto batch = static_cast<std::size_t>(state.range(0));
  threads_from(state);
  const auto q = random({batch * kTokens, kWidth}, 7), kk = random({batch * kTokens, kWidth}, 8),
             v = random({batch * kTokens, kWidth}, 9);
  for (auto _ : state) benchmark::DoNotOptimize(k::attention(q, kk, v, batch, kTokens, kHeads));
}

void BM_AttentionReference(benchmark::State& state) {
  const auto batch = static_cast<std::size_t>(state.range(0));
  const auto q = random({batch * kTokens, kWidth}, 7), kk = random({batch * kTokens, kWidth}, 8),
             v = random({batch * kTokens, kWidth}, 9);
  for (auto _ : state) benchmark::DoNotOptimize(ref::attention(q, kk, v, batch, kTokens, kHeads));
}

// Whole toy backbone forward, b×3×32×32 → b×6×64.
void BM_EncodeToy(benchmark::State& state) {
  const auto batch = static_cast<std::size_t>(state.range(0));
  threads_from(state);
  const auto bb = rine::make_random_backbone({.width = 64, .blocks = 6, .patch = 8, .heads = 4, .image_side = 32}, 1);
  auto pixels = random({batch, 3, 32, 32}, 10);
  for (auto& v : pixels.values()) v = 0.5f * (v + 1.0f);
  for (auto _ : state) benchmark::DoNotOptimize(bb.encode(pixels));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(batch));
}

}  // namespace

BENCHMARK(BM_MatmulParallel)->ArgsProduct({{128, 512}, {1, 2, 4}})->Unit(benchmark::kMillisecond)->UseRealTime();
BENCHMARK(BM_MatmulReference)->Arg(128)->Arg(512)->Unit(benchmark::kMillisecond)->UseRealTime();
BENCHMARK(BM_SoftmaxParallel)->ArgsProduct({{1024}, {1, 2, 4}})->Unit(benchmark::kMicrosecond)->UseRealTime();
BENCHMARK(BM_SoftmaxReference)->Arg(1024)->Unit(benchmark::kMicrosecond)->UseRealTime();
BENCHMARK(BM_LayerNormParallel)->ArgsProduct({{1028}, {1, 2, 4}})->Unit(benchmark::kMicrosecond)->UseRealTime();
BENCHMARK(BM_LayerNormReference)->Arg(1028)->Unit(benchmark::kMicrosecond)->UseRealTime();
BENCHMARK(BM_AttentionParallel)->ArgsProduct({{2}, {1, 2, 4}})->Unit(benchmark::kMillisecond)->UseRealTime();
BENCHMARK(BM_AttentionReference)->Arg(2)->Unit(benchmark::kMillisecond)->UseRealTime();
BENCHMARK(BM_EncodeToy)->ArgsProduct({{64}, {1, 2, 4}})->Unit(benchmark::kMillisecond)->UseRealTime();

BENCHMARK_MAIN();
