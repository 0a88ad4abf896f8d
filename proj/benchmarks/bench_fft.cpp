#include <benchmark/benchmark.h>

#include "hmr/hrr.hpp"

using namespace hmr;

namespace {

void ConvNaive(benchmark::State& state) {
    const std::size_t d = static_cast<std::size_t>(state.range(0));
    Rng rng(1);
    auto x = gaussian<double>(rng, {d}, 1.0);
    auto y = gaussian<double>(rng, {d}, 1.0);
    for (auto _ : state) {
        auto z = circ_conv_naive<double>(nullptr, x, y);
        benchmark::DoNotOptimize(z.data().data());
    }
    state.SetComplexityN(state.range(0));
}
BENCHMARK(ConvNaive)->RangeMultiplier(2)->Range(8, 512)->Complexity(benchmark::oNSquared);

void ConvFft(benchmark::State& state) {
    const std::size_t d = static_cast<std::size_t>(state.range(0));
    Rng rng(1);
    auto x = gaussian<double>(rng, {d}, 1.0);
    auto y = gaussian<double>(rng, {d}, 1.0);
    for (auto _ : state) {
        auto z = circ_conv_fft<double>(nullptr, x, y);
        benchmark::DoNotOptimize(z.data().data());
    }
    state.SetComplexityN(state.range(0));
}
BENCHMARK(ConvFft)->RangeMultiplier(2)->Range(8, 512)->Complexity();

// the production embedding width (Bluestein path)
void ConvFft96(benchmark::State& state) {
    Rng rng(1);
    auto x = gaussian<float>(rng, {96}, 1.0);
    auto y = gaussian<float>(rng, {96}, 1.0);
    for (auto _ : state) {
        auto z = circ_conv_fft<float>(nullptr, x, y);
        benchmark::DoNotOptimize(z.data().data());
    }
}
BENCHMARK(ConvFft96);

void BindRows(benchmark::State& state) {
    const std::size_t rows = static_cast<std::size_t>(state.range(0));
    Rng rng(1);
    auto item = gaussian<float>(rng, {rows, 96}, 1.0);
    auto attr = gaussian<float>(rng, {rows, 96}, 1.0);
    auto alpha = Tensor<float>::scalar(0.1f);
    auto gain = Tensor<float>::full({96}, 1.0f);
    auto bias = Tensor<float>::zeros({96});
    for (auto _ : state) {
        auto z = bind_embed<float>(nullptr, item, attr, alpha, gain, bias, 1e-5f);
        benchmark::DoNotOptimize(z.data().data());
    }
    state.SetComplexityN(state.range(0));
}
BENCHMARK(BindRows)->RangeMultiplier(4)->Range(64, 4096)->Complexity(benchmark::oN);

}  // namespace

BENCHMARK_MAIN();
