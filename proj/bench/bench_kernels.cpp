// Serial reference kernels against their OpenMP versions.

#include <benchmark/benchmark.h>

#include <vector>

#include "fedpull/kernels.hpp"
#include "fedpull/rng.hpp"

using namespace fedpull;

namespace {

std::vector<float> random_vec(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(rng.uniform(-1.0, 1.0));
  return v;
}

template <bool Parallel>
void BM_matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  // Runtime dims, as in the model; constants would let the serial call fold.
  const auto k = static_cast<std::size_t>(state.range(1));
  const auto m = static_cast<std::size_t>(state.range(2));
  const auto x = random_vec(n * k, 1), w = random_vec(k * m, 2);
  std::vector<float> y(n * m);
  for (auto _ : state) {
    if constexpr (Parallel)
      kernels::omp::matmul(x.data(), w.data(), y.data(), n, k, m);
    else
      kernels::serial::matmul(x.data(), w.data(), y.data(), n, k, m);
    benchmark::DoNotOptimize(y.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * n * k * m));
}

template <bool Parallel>
void BM_weighted_sum(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  std::vector<std::vector<float>> in;
  std::vector<std::span<const float>> spans;
  for (std::uint64_t c = 0; c < 5; ++c) in.push_back(random_vec(n, c));
  for (const auto& v : in) spans.emplace_back(v);
  const std::vector<double> w{0.4, 0.4, 0.1, 0.07, 0.03};
  std::vector<float> out(n);
  for (auto _ : state) {
    if constexpr (Parallel)
      kernels::omp::weighted_sum(spans, w, out);
    else
      kernels::serial::weighted_sum(spans, w, out);
    benchmark::DoNotOptimize(out.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * n));
}

}  // namespace

BENCHMARK(BM_matmul<false>)->Args({16, 32, 64})->Args({256, 32, 64})->Args({4096, 32, 64});
BENCHMARK(BM_matmul<true>)->Args({16, 32, 64})->Args({256, 32, 64})->Args({4096, 32, 64});
BENCHMARK(BM_weighted_sum<false>)->Arg(1024)->Arg(1 << 16)->Arg(1 << 20);
BENCHMARK(BM_weighted_sum<true>)->Arg(1024)->Arg(1 << 16)->Arg(1 << 20);

BENCHMARK_MAIN();
