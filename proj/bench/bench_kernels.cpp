// SPDX-License-Identifier: Apache-2.0
//
// Serial reference kernels against the OpenMP path on model-sized shapes.

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "ddit/kernels.hpp"

namespace k = ddit::kernels;

namespace {

std::vector<float> random_vec(size_t n, unsigned seed) {
    std::mt19937 rng(seed);
    std::normal_distribution<float> d;
    std::vector<float> v(n);
    for (auto& x : v) x = d(rng);
    return v;
}

template <bool Parallel>
void BM_gemm(benchmark::State& state) {
    const int64_t m = state.range(0), n = state.range(1), kk = state.range(2);
    auto a = random_vec(static_cast<size_t>(m * kk), 1);
    auto b = random_vec(static_cast<size_t>(kk * n), 2);
    std::vector<float> c(static_cast<size_t>(m * n));
    for (auto _ : state) {
        if (Parallel)
            k::parallel::gemm(a.data(), b.data(), c.data(), m, n, kk, false, false, false);
        else
            k::reference::gemm(a.data(), b.data(), c.data(), m, n, kk, false, false, false);
        benchmark::DoNotOptimize(c.data());
    }
    state.counters["GFLOP/s"] =
        benchmark::Counter(2.0 * m * n * kk, benchmark::Counter::kIsIterationInvariantRate, benchmark::Counter::kIs1000);
}

template <bool Parallel>
void BM_gemm_transposed_b(benchmark::State& state) {
    const int64_t m = state.range(0), n = state.range(1), kk = state.range(2);
    auto a = random_vec(static_cast<size_t>(m * kk), 1);
    auto b = random_vec(static_cast<size_t>(kk * n), 2);
    std::vector<float> c(static_cast<size_t>(m * n));
    for (auto _ : state) {
        if (Parallel)
            k::parallel::gemm(a.data(), b.data(), c.data(), m, n, kk, false, true, false);
        else
            k::reference::gemm(a.data(), b.data(), c.data(), m, n, kk, false, true, false);
        benchmark::DoNotOptimize(c.data());
    }
    state.counters["GFLOP/s"] =
        benchmark::Counter(2.0 * m * n * kk, benchmark::Counter::kIsIterationInvariantRate, benchmark::Counter::kIs1000);
}

template <bool Parallel>
void BM_softmax(benchmark::State& state) {
    const int64_t rows = state.range(0), cols = state.range(1);
    auto x = random_vec(static_cast<size_t>(rows * cols), 3);
    std::vector<float> y(x.size());
    for (auto _ : state) {
        if (Parallel)
            k::parallel::softmax_rows(x.data(), y.data(), rows, cols);
        else
            k::reference::softmax_rows(x.data(), y.data(), rows, cols);
        benchmark::DoNotOptimize(y.data());
    }
}

template <bool Parallel>
void BM_layernorm(benchmark::State& state) {
    const int64_t rows = state.range(0), cols = state.range(1);
    auto x = random_vec(static_cast<size_t>(rows * cols), 4);
    std::vector<float> y(x.size()), mean(static_cast<size_t>(rows)), rstd(static_cast<size_t>(rows));
    for (auto _ : state) {
        if (Parallel)
            k::parallel::layernorm_rows<float>(x.data(), nullptr, nullptr, y.data(), mean.data(), rstd.data(), rows,
                                               cols, 1e-5);
        else
            k::reference::layernorm_rows<float>(x.data(), nullptr, nullptr, y.data(), mean.data(), rstd.data(), rows,
                                                cols, 1e-5);
        benchmark::DoNotOptimize(y.data());
    }
}

} // namespace

// Shapes: a batch of 16 toy images x 64 patches at width 32..256.
BENCHMARK(BM_gemm<false>)->Name("gemm/reference")->Args({1024, 96, 32})->Args({1024, 256, 256})->Args({256, 1152, 1152});
BENCHMARK(BM_gemm<true>)->Name("gemm/parallel")->Args({1024, 96, 32})->Args({1024, 256, 256})->Args({256, 1152, 1152});
BENCHMARK(BM_gemm_transposed_b<false>)->Name("gemm_tb/reference")->Args({1024, 256, 256});
BENCHMARK(BM_gemm_transposed_b<true>)->Name("gemm_tb/parallel")->Args({1024, 256, 256});
BENCHMARK(BM_softmax<false>)->Name("softmax/reference")->Args({4096, 64});
BENCHMARK(BM_softmax<true>)->Name("softmax/parallel")->Args({4096, 64});
BENCHMARK(BM_layernorm<false>)->Name("layernorm/reference")->Args({4096, 256});
BENCHMARK(BM_layernorm<true>)->Name("layernorm/parallel")->Args({4096, 256});

BENCHMARK_MAIN();
