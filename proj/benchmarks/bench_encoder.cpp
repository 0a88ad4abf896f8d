#include <benchmark/benchmark.h>

#include "hmr/ssm.hpp"

using namespace hmr;

namespace {

std::vector<SsmBlockParams<float>> make_blocks(int n_layers, Rng& rng) {
    std::vector<SsmBlockParams<float>> blocks;
    for (int i = 0; i < n_layers; ++i) blocks.push_back(SsmBlockParams<float>::init(96, 16, 4, rng));
    return blocks;
}

void EncoderScan(benchmark::State& state) {
    Rng rng(1);
    auto blocks = make_blocks(2, rng);
    const std::size_t L = static_cast<std::size_t>(state.range(0));
    auto x = gaussian<float>(rng, {L, 96}, 1.0);
    for (auto _ : state) {
        auto y = encoder_forward<float>(nullptr, x, blocks, 1e-5f);
        benchmark::DoNotOptimize(y.data().data());
    }
    state.SetComplexityN(state.range(0));
}
BENCHMARK(EncoderScan)->RangeMultiplier(2)->Range(32, 1024)->Complexity(benchmark::oN);

void BlockStep(benchmark::State& state) {
    Rng rng(1);
    auto blocks = make_blocks(1, rng);
    auto st = BlockState<float>::zeros(96, 16, 4);
    auto x = gaussian<float>(rng, {96}, 1.0);
    std::vector<float> y(96);
    for (auto _ : state) {
        block_step<float>(x.data(), st, blocks[0], 1e-5f, std::span<float>(y));
        benchmark::DoNotOptimize(y.data());
    }
}
BENCHMARK(BlockStep);

}  // namespace

BENCHMARK_MAIN();
