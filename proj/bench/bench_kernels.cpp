#include <benchmark/benchmark.h>

#include "genplugin/kernels.hpp"
#include "genplugin/rng.hpp"

using namespace genplugin;
using kernels::Trans;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
    Rng rng(seed);
    Matrix m(r, c);
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = rng.normal();
    return m;
}

template <auto Gemm>
void BM_Gemm(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const Matrix a = random_matrix(n, n, 1), b = random_matrix(n, n, 2);
    Matrix c;
    for (auto _ : state) {
        Gemm(a, Trans::No, b, Trans::Yes, c, false);
        benchmark::DoNotOptimize(c.data());
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}

template <auto Nearest>
void BM_NearestCentroid(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const Matrix pts = random_matrix(n, 64, 3), cents = random_matrix(256, 64, 4);
    std::vector<std::size_t> assign;
    std::vector<double> dist;
    for (auto _ : state) {
        Nearest(pts, cents, assign, dist);
        benchmark::DoNotOptimize(assign.data());
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n));
}

template <auto Cosine>
void BM_CosineScores(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const Matrix rows = random_matrix(n, 128, 5), q = random_matrix(1, 128, 6);
    std::vector<double> out;
    for (auto _ : state) {
        Cosine(q.row_span(0), rows, out);
        benchmark::DoNotOptimize(out.data());
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n));
}

}  // namespace

BENCHMARK(BM_Gemm<kernels::serial::gemm>)->Name("gemm/serial")->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(BM_Gemm<kernels::parallel::gemm>)->Name("gemm/parallel")->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(BM_NearestCentroid<kernels::serial::nearest_centroid>)->Name("nearest_centroid/serial")->Arg(1000)->Arg(8000);
BENCHMARK(BM_NearestCentroid<kernels::parallel::nearest_centroid>)->Name("nearest_centroid/parallel")->Arg(1000)->Arg(8000);
BENCHMARK(BM_CosineScores<kernels::serial::cosine_scores>)->Name("cosine_scores/serial")->Arg(1000)->Arg(20000);
BENCHMARK(BM_CosineScores<kernels::parallel::cosine_scores>)->Name("cosine_scores/parallel")->Arg(1000)->Arg(20000);

BENCHMARK_MAIN();
