// Serial reference vs OpenMP kernels on the matrix shapes the model uses.
#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "moxe/kernels.hpp"

namespace k = moxe::kernels;

namespace {

using Kernel = void (*)(std::span<const double>, std::span<const double>, std::span<double>, std::size_t,
                        std::size_t, std::size_t);

std::vector<double> random_matrix(std::size_t n, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist;
  std::vector<double> v(n);
  for (auto& x : v) x = dist(rng);
  return v;
}

// Square-ish problem: rows = batch·seq tokens, inner and output = model width.
template <Kernel F>
void BM_matmul(benchmark::State& state) {
  const auto m = static_cast<std::size_t>(state.range(0));
  const auto d = static_cast<std::size_t>(state.range(1));
  const auto a = random_matrix(m * d, 1), b = random_matrix(d * d, 2);
  std::vector<double> out(m * d);
  for (auto _ : state) {
    F(a, b, out, m, d, d);
    benchmark::DoNotOptimize(out.data());
    benchmark::ClobberMemory();
  }
  state.SetItemsProcessed(static_cast<int64_t>(state.iterations() * m * d * d));
  state.counters["threads"] = k::max_threads();
}

void shapes(benchmark::internal::Benchmark* b) {
  for (int m : {64, 1024})
    for (int d : {64, 256}) b->Args({m, d});
}

}  // namespace

BENCHMARK(BM_matmul<k::serial::matmul_acc>)->Name("matmul/serial")->Apply(shapes);
BENCHMARK(BM_matmul<k::parallel::matmul_acc>)->Name("matmul/parallel")->Apply(shapes);
BENCHMARK(BM_matmul<k::serial::matmul_nt_acc>)->Name("matmul_nt/serial")->Apply(shapes);
BENCHMARK(BM_matmul<k::parallel::matmul_nt_acc>)->Name("matmul_nt/parallel")->Apply(shapes);
BENCHMARK(BM_matmul<k::serial::matmul_tn_acc>)->Name("matmul_tn/serial")->Apply(shapes);
BENCHMARK(BM_matmul<k::parallel::matmul_tn_acc>)->Name("matmul_tn/parallel")->Apply(shapes);

BENCHMARK_MAIN();
