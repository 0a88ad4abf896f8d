#include <benchmark/benchmark.h>

#include "hmr/model.hpp"

using namespace hmr;

namespace {

struct Setup {
    ModelConfig cfg;
    ModelParams<float> params;
    IntTensor items, attrs;

    explicit Setup(int L, bool compression) {
        cfg.d = 96;
        cfg.d_state = 16;
        cfg.n_layers = 2;
        cfg.L = L;
        cfg.vocab_items = 2000;
        cfg.vocab_attrs = 51;
        cfg.use_compression = compression;
        cfg.seed = 1;
        Rng rng(cfg.seed);
        params = ModelParams<float>::init(cfg, rng);
        items = IntTensor::zeros({static_cast<std::size_t>(L)});
        attrs = IntTensor::zeros({static_cast<std::size_t>(L)});
        for (int t = 0; t < L; ++t) {
            items.at(static_cast<std::size_t>(t)) =
                1 + static_cast<std::int64_t>(rng.uniform_index(1999));
            attrs.at(static_cast<std::size_t>(t)) = 1 + static_cast<std::int64_t>(rng.uniform_index(50));
        }
    }
};

void InferScan(benchmark::State& state) {
    Setup s(static_cast<int>(state.range(0)), false);
    for (auto _ : state) {
        auto l = model_final_logits(s.items, s.attrs, s.params, s.cfg);
        benchmark::DoNotOptimize(l.data().data());
    }
    state.SetComplexityN(state.range(0));
}
BENCHMARK(InferScan)->Arg(50)->Arg(256)->Arg(512)->Complexity(benchmark::oN);

void InferRecurrent(benchmark::State& state) {
    Setup s(static_cast<int>(state.range(0)), false);
    for (auto _ : state) {
        auto l = forward_recurrent(s.items, s.attrs, s.params, s.cfg);
        benchmark::DoNotOptimize(l.data());
    }
    state.SetComplexityN(state.range(0));
}
BENCHMARK(InferRecurrent)->Arg(50)->Arg(256)->Arg(512)->Complexity(benchmark::oN);

void InferBundled(benchmark::State& state) {
    Setup s(static_cast<int>(state.range(0)), true);
    for (auto _ : state) {
        auto l = model_final_logits(s.items, s.attrs, s.params, s.cfg);
        benchmark::DoNotOptimize(l.data().data());
    }
    state.SetComplexityN(state.range(0));
}
BENCHMARK(InferBundled)->Arg(50)->Arg(256)->Arg(512)->Complexity(benchmark::oN);

}  // namespace

BENCHMARK_MAIN();
