#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "hmr/data.hpp"
#include "hmr/model.hpp"

namespace hmr {

struct OptimConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

// Decoupled-weight-decay Adam. Moments are zero-initialized and the step
// counter advances once per call; decay is applied to the raw weights
// before the bias-corrected moment update. Rows frozen in a ParamRef
// (embedding padding rows) are skipped entirely.
template <class T>
struct AdamWState {
    OptimConfig cfg;
    std::int64_t step = 0;
    std::vector<std::vector<T>> m, v;

    static AdamWState init(const std::vector<ParamRef<T>>& params, OptimConfig cfg);
};

template <class T>
void adamw_step(std::vector<ParamRef<T>>& params, AdamWState<T>& state);

struct EpochRecord {
    int epoch = 0;
    double loss = 0;
    double hr10 = 0;
    double ndcg10 = 0;
    double seconds = 0;
};

struct BenchRecord {
    std::string mode;
    int L = 0;
    double latency_ms = 0;
    std::size_t peak_bytes = 0;
};

std::string epoch_record_json(const EpochRecord& r);
std::string bench_record_json(const BenchRecord& r);

// Rank of `target` under the deterministic tie rule
//   rank = 1 + |{j != 0 : s_j > s_t}| + |{j != 0 : s_j = s_t, j < t}|.
// scores[0] must already be masked to -infinity by the caller.
template <class T>
int rank_of_target(std::span<const T> scores, std::int64_t target);

// HR@k = fraction of ranks <= k; NDCG@k = mean of 1/log2(1+rank) over
// ranks <= k (0 otherwise).
std::pair<double, double> hit_and_ndcg_at_k(const std::vector<int>& ranks, int k);

// Leave-one-out evaluation: scores the full catalog from each user's
// prefix row, masks the padding index, ranks the held-out item.
template <class T>
std::pair<double, double> evaluate(const ModelParams<T>& params, const ModelConfig& cfg,
                                   const DatasetSplit& split, int k, int batch_size = 64);

struct TrainOptions {
    int epochs = 10;
    int batch_size = 64;
    OptimConfig optim;
    std::uint64_t seed = 42;
    std::string metrics_path;  // JSON-lines sink, empty = none
    bool verbose = false;
};

struct TrainResult {
    std::vector<EpochRecord> epochs;
};

// Shuffled minibatch training with per-epoch leave-one-out evaluation.
// Under compression, training targets are realigned to window level.
template <class T>
TrainResult train(const ModelConfig& cfg, const TrainOptions& opts, const DatasetSplit& split,
                  ModelParams<T>& params);

enum class BenchMode { Scan, Recurrent, Bundled };

// Median single-sequence final-logit inference latency over `repeats`
// timed runs (two warmups excluded) plus the peak transient allocation
// of the measured path.
template <class T>
BenchRecord bench(const ModelParams<T>& params, const ModelConfig& cfg, int L, BenchMode mode, int repeats);

}  // namespace hmr
