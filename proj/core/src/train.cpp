#include "hmr/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include <json.hpp>

#include "hmr/alloc_stats.hpp"

namespace hmr {

template <class T>
AdamWState<T> AdamWState<T>::init(const std::vector<ParamRef<T>>& params, OptimConfig cfg) {
    AdamWState<T> st;
    st.cfg = cfg;
    st.m.reserve(params.size());
    st.v.reserve(params.size());
    for (const auto& p : params) {
        st.m.emplace_back(p.tensor->size(), T(0));
        st.v.emplace_back(p.tensor->size(), T(0));
    }
    return st;
}

template <class T>
void adamw_step(std::vector<ParamRef<T>>& params, AdamWState<T>& state) {
    if (state.m.size() != params.size())
        throw ContractError("adamw_step: optimizer state does not match parameter list");
    ++state.step;
    const auto& c = state.cfg;
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& p = params[pi];
        auto theta = p.tensor->data();
        auto grad = p.tensor->grad();
        auto& m = state.m[pi];
        auto& v = state.v[pi];
        std::size_t start = 0;
        if (p.frozen_rows > 0) {
            if (p.tensor->rank() < 1 || p.tensor->dim(0) < p.frozen_rows)
                throw ContractError("adamw_step: frozen rows exceed parameter " + p.name);
            start = p.frozen_rows * (p.tensor->size() / p.tensor->dim(0));
        }
        for (std::size_t i = start; i < theta.size(); ++i) {
            const double g = static_cast<double>(grad[i]);
            if (!std::isfinite(g))
                throw TrainingError("adamw_step: non-finite gradient in parameter '" + p.name + "'");
            double th = static_cast<double>(theta[i]);
            th -= c.lr * c.weight_decay * th;  // decoupled decay before the moment update
            const double mi = c.beta1 * m[i] + (1.0 - c.beta1) * g;
            const double vi = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
            m[i] = static_cast<T>(mi);
            v[i] = static_cast<T>(vi);
            th -= c.lr * (mi / bc1) / (std::sqrt(vi / bc2) + c.eps);
            theta[i] = static_cast<T>(th);
        }
    }
}

std::string epoch_record_json(const EpochRecord& r) {
    nlohmann::ordered_json j;
    j["epoch"] = r.epoch;
    j["loss"] = r.loss;
    j["hr10"] = r.hr10;
    j["ndcg10"] = r.ndcg10;
    j["seconds"] = r.seconds;
    return j.dump();
}

std::string bench_record_json(const BenchRecord& r) {
    nlohmann::ordered_json j;
    j["mode"] = r.mode;
    j["L"] = r.L;
    j["latency_ms"] = r.latency_ms;
    j["peak_bytes"] = r.peak_bytes;
    return j.dump();
}

template <class T>
int rank_of_target(std::span<const T> scores, std::int64_t target) {
    if (target < 1 || static_cast<std::size_t>(target) >= scores.size())
        throw ContractError("rank_of_target: target " + std::to_string(target) + " outside [1, " +
                            std::to_string(scores.size()) + ")");
    const T st = scores[static_cast<std::size_t>(target)];
    int rank = 1;
    for (std::size_t j = 1; j < scores.size(); ++j) {
        if (scores[j] > st)
            ++rank;
        else if (scores[j] == st && static_cast<std::int64_t>(j) < target)
            ++rank;
    }
    return rank;
}

std::pair<double, double> hit_and_ndcg_at_k(const std::vector<int>& ranks, int k) {
    if (ranks.empty()) throw ContractError("hit_and_ndcg_at_k: empty rank list");
    if (k < 1) throw ConfigError("hit_and_ndcg_at_k: k must be >= 1");
    double hits = 0, gain = 0;
    for (int r : ranks) {
        if (r < 1) throw ContractError("hit_and_ndcg_at_k: rank " + std::to_string(r) + " < 1");
        if (r <= k) {
            hits += 1.0;
            gain += 1.0 / std::log2(1.0 + static_cast<double>(r));
        }
    }
    const double n = static_cast<double>(ranks.size());
    return {hits / n, gain / n};
}

namespace {

// Gathers rows `rows` of a [U,L] IntTensor into a [B,L] batch.
IntTensor gather_rows(const IntTensor& t, std::span<const std::size_t> rows) {
    const std::size_t cols = t.shape[1];
    IntTensor out = IntTensor::zeros({rows.size(), cols});
    for (std::size_t i = 0; i < rows.size(); ++i)
        std::copy_n(t.data.begin() + rows[i] * cols, cols, out.data.begin() + i * cols);
    return out;
}

template <class T>
std::vector<int> ranks_for_rows(const ModelParams<T>& params, const ModelConfig& cfg,
                                const DatasetSplit& split, std::span<const std::size_t> rows) {
    IntTensor items = gather_rows(split.inputs, rows);
    IntTensor attrs = gather_rows(split.attrs, rows);
    Tensor<T> logits = model_final_logits(items, attrs, params, cfg);
    const std::size_t v = logits.dim(1);
    auto ld = logits.data();
    std::vector<int> ranks;
    ranks.reserve(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        T* row = ld.data() + i * v;
        row[0] = -std::numeric_limits<T>::infinity();
        ranks.push_back(rank_of_target(std::span<const T>(row, v), split.test_target[rows[i]]));
    }
    return ranks;
}

}  // namespace

template <class T>
std::pair<double, double> evaluate(const ModelParams<T>& params, const ModelConfig& cfg,
                                   const DatasetSplit& split, int k, int batch_size) {
    if (batch_size < 1) throw ConfigError("evaluate: batch_size must be >= 1");
    const std::size_t users = split.user_count();
    std::vector<int> ranks;
    ranks.reserve(users);
    std::vector<std::size_t> rows;
    for (std::size_t at = 0; at < users; at += static_cast<std::size_t>(batch_size)) {
        rows.clear();
        for (std::size_t u = at; u < std::min(users, at + static_cast<std::size_t>(batch_size)); ++u)
            rows.push_back(u);
        auto batch_ranks = ranks_for_rows(params, cfg, split, rows);
        ranks.insert(ranks.end(), batch_ranks.begin(), batch_ranks.end());
    }
    return hit_and_ndcg_at_k(ranks, k);
}

template <class T>
TrainResult train(const ModelConfig& cfg, const TrainOptions& opts, const DatasetSplit& split,
                  ModelParams<T>& params) {
    cfg.validate();
    if (split.L != cfg.L)
        throw ShapeError("train: split rows have length " + std::to_string(split.L) + " but config expects L=" +
                         std::to_string(cfg.L));
    if (cfg.vocab_items < split.num_items + 1 || cfg.vocab_attrs < split.num_attrs + 1)
        throw ConfigError("train: config vocab sizes too small for the dataset (items " +
                          std::to_string(split.num_items) + ", attrs " + std::to_string(split.num_attrs) + ")");
    if (opts.epochs < 1 || opts.batch_size < 1)
        throw ConfigError("train: epochs and batch_size must be >= 1");

    auto trainable = params.trainable(cfg);
    for (auto& p : trainable) p.tensor->set_requires_grad(true);
    AdamWState<T> optim = AdamWState<T>::init(trainable, opts.optim);
    Rng dropout_rng(opts.seed ^ 0x9e3779b97f4a7c15ull);

    std::ofstream metrics;
    if (!opts.metrics_path.empty()) {
        metrics.open(opts.metrics_path, std::ios::trunc);
        if (!metrics) throw IoError("train: cannot open metrics log " + opts.metrics_path);
    }

    const std::size_t users = split.user_count();
    const std::size_t Ls = static_cast<std::size_t>(split.L);
    const std::size_t k = static_cast<std::size_t>(cfg.bundle_k);
    const std::size_t target_len = cfg.use_compression ? bundle_length(Ls, k) : Ls;

    TrainResult result;
    for (int epoch = 1; epoch <= opts.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        Rng shuffle_rng(opts.seed + static_cast<std::uint64_t>(epoch));
        std::vector<std::size_t> order = shuffle_rng.permutation(users);

        double loss_sum = 0;
        std::size_t batches = 0;
        for (std::size_t at = 0; at < users; at += static_cast<std::size_t>(opts.batch_size)) {
            std::span<const std::size_t> rows(order.data() + at,
                                              std::min(static_cast<std::size_t>(opts.batch_size), users - at));
            IntTensor items = gather_rows(split.inputs, rows);
            IntTensor attrs = gather_rows(split.attrs, rows);
            IntTensor targets = IntTensor::zeros({rows.size(), target_len});
            for (std::size_t i = 0; i < rows.size(); ++i) {
                auto trow = std::span<const std::int64_t>(split.train_targets.data).subspan(rows[i] * Ls, Ls);
                if (cfg.use_compression) {
                    auto irow = std::span<const std::int64_t>(split.inputs.data).subspan(rows[i] * Ls, Ls);
                    auto wt = window_targets(irow, trow, k);
                    std::copy(wt.begin(), wt.end(), targets.data.begin() + i * target_len);
                } else {
                    std::copy(trow.begin(), trow.end(), targets.data.begin() + i * target_len);
                }
            }

            Tape<T> tape;
            Tensor<T> logits = model_forward(&tape, items, attrs, params, cfg, true, &dropout_rng);
            Tensor<T> loss = loss_masked(&tape, logits, targets);
            for (auto& p : trainable) p.tensor->zero_grad();
            backward(loss, tape);
            adamw_step(trainable, optim);
            tape.clear();
            loss_sum += static_cast<double>(loss.item());
            ++batches;
        }

        auto [hr, ndcg] = evaluate(params, cfg, split, 10, opts.batch_size);
        const auto t1 = std::chrono::steady_clock::now();
        EpochRecord rec;
        rec.epoch = epoch;
        rec.loss = loss_sum / static_cast<double>(batches);
        rec.hr10 = hr;
        rec.ndcg10 = ndcg;
        rec.seconds = std::chrono::duration<double>(t1 - t0).count();
        result.epochs.push_back(rec);
        if (metrics.is_open()) {
            metrics << epoch_record_json(rec) << "\n";
            metrics.flush();
        }
        if (opts.verbose)
            std::fprintf(stderr, "epoch %d loss %.6f hr10 %.4f ndcg10 %.4f (%.1fs)\n", rec.epoch, rec.loss,
                         rec.hr10, rec.ndcg10, rec.seconds);
    }
    return result;
}

template <class T>
BenchRecord bench(const ModelParams<T>& params, const ModelConfig& cfg, int L, BenchMode mode, int repeats) {
    if (L < 1) throw ConfigError("bench: L must be >= 1");
    if (repeats < 1) throw ConfigError("bench: repeats must be >= 1");

    ModelConfig run_cfg = cfg;
    run_cfg.use_compression = mode == BenchMode::Bundled;

    Rng rng(cfg.seed + static_cast<std::uint64_t>(L));
    IntTensor items = IntTensor::zeros({static_cast<std::size_t>(L)});
    IntTensor attrs = IntTensor::zeros({static_cast<std::size_t>(L)});
    for (int t = 0; t < L; ++t) {
        items.at(static_cast<std::size_t>(t)) =
            1 + static_cast<std::int64_t>(rng.uniform_index(static_cast<std::uint64_t>(cfg.vocab_items - 1)));
        attrs.at(static_cast<std::size_t>(t)) =
            1 + static_cast<std::int64_t>(rng.uniform_index(static_cast<std::uint64_t>(cfg.vocab_attrs - 1)));
    }

    auto run_once = [&]() {
        if (mode == BenchMode::Recurrent) {
            volatile T sink = forward_recurrent(items, attrs, params, run_cfg).back();
            (void)sink;
        } else {
            volatile T sink = model_final_logits(items, attrs, params, run_cfg).data().back();
            (void)sink;
        }
    };

    run_once();
    run_once();  // warmup

    const std::size_t base = alloc_stats::current_bytes();
    alloc_stats::reset_peak();
    std::vector<double> times;
    times.reserve(static_cast<std::size_t>(repeats));
    for (int r = 0; r < repeats; ++r) {
        const auto t0 = std::chrono::steady_clock::now();
        run_once();
        const auto t1 = std::chrono::steady_clock::now();
        times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    const std::size_t peak = alloc_stats::peak_bytes() - base;

    std::sort(times.begin(), times.end());
    const std::size_t mid = times.size() / 2;
    const double median =
        times.size() % 2 ? times[mid] : 0.5 * (times[mid - 1] + times[mid]);

    BenchRecord rec;
    rec.mode = mode == BenchMode::Scan ? "scan" : mode == BenchMode::Recurrent ? "recurrent" : "bundled";
    rec.L = L;
    rec.latency_ms = median;
    rec.peak_bytes = peak;
    return rec;
}

#define HMR_INSTANTIATE_TRAIN(T)                                                                           \
    template struct AdamWState<T>;                                                                         \
    template void adamw_step<T>(std::vector<ParamRef<T>>&, AdamWState<T>&);                                \
    template int rank_of_target<T>(std::span<const T>, std::int64_t);                                      \
    template std::pair<double, double> evaluate<T>(const ModelParams<T>&, const ModelConfig&,              \
                                                   const DatasetSplit&, int, int);                         \
    template TrainResult train<T>(const ModelConfig&, const TrainOptions&, const DatasetSplit&,            \
                                  ModelParams<T>&);                                                        \
    template BenchRecord bench<T>(const ModelParams<T>&, const ModelConfig&, int, BenchMode, int);

HMR_INSTANTIATE_TRAIN(float)
HMR_INSTANTIATE_TRAIN(double)

}  // namespace hmr
