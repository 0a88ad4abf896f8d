#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "hmr/data.hpp"
#include "hmr/model.hpp"
#include "hmr/train.hpp"

using namespace hmr;
namespace fs = std::filesystem;

namespace {

using DT = Tensor<double>;

std::vector<ParamRef<double>> one_param(DT& t, std::size_t frozen = 0) {
    return {{"p", &t, frozen}};
}

// Independent sort-based ranking + metric aggregation.
template <class T>
std::pair<double, double> brute_force_eval(const ModelParams<T>& params, const ModelConfig& cfg,
                                           const DatasetSplit& split, int k) {
    const std::size_t L = static_cast<std::size_t>(split.L);
    double hr = 0, ndcg = 0;
    for (std::size_t u = 0; u < split.user_count(); ++u) {
        IntTensor items(Shape{L}, std::vector<std::int64_t>(split.inputs.data.begin() + u * L,
                                                            split.inputs.data.begin() + (u + 1) * L));
        IntTensor attrs(Shape{L}, std::vector<std::int64_t>(split.attrs.data.begin() + u * L,
                                                            split.attrs.data.begin() + (u + 1) * L));
        auto logits = model_final_logits(items, attrs, params, cfg);
        const std::size_t v = logits.dim(1);
        std::vector<std::int64_t> ids(v - 1);
        for (std::size_t j = 1; j < v; ++j) ids[j - 1] = static_cast<std::int64_t>(j);
        auto ld = logits.data();
        std::sort(ids.begin(), ids.end(), [&](std::int64_t a, std::int64_t b) {
            const T sa = ld[static_cast<std::size_t>(a)], sb = ld[static_cast<std::size_t>(b)];
            if (sa != sb) return sa > sb;
            return a < b;
        });
        const auto at = std::find(ids.begin(), ids.end(), split.test_target[u]);
        const int rank = static_cast<int>(at - ids.begin()) + 1;
        if (rank <= k) {
            hr += 1.0;
            ndcg += 1.0 / std::log2(1.0 + rank);
        }
    }
    const double n = static_cast<double>(split.user_count());
    return {hr / n, ndcg / n};
}

}  // namespace

TEST_CASE("adamw single-step worked examples") {
    OptimConfig base;
    base.weight_decay = 0.0;

    {
        auto theta = DT::scalar(0.0);
        theta.set_requires_grad(true);
        theta.grad()[0] = 1.0;
        auto params = one_param(theta);
        auto st = AdamWState<double>::init(params, base);
        adamw_step(params, st);
        CHECK(theta.data()[0] == doctest::Approx(-1e-3).epsilon(1e-6));
    }
    {
        Rng rng(1);
        auto theta = gaussian<double>(rng, {5}, 1.0);
        std::vector<double> before(theta.data().begin(), theta.data().end());
        theta.set_requires_grad(true);
        auto params = one_param(theta);
        auto st = AdamWState<double>::init(params, base);
        adamw_step(params, st);  // zero gradients
        for (std::size_t i = 0; i < 5; ++i) CHECK(theta.data()[i] == before[i]);
    }
    {
        OptimConfig decay = base;
        decay.weight_decay = 0.01;
        auto theta = DT::scalar(1.0);
        theta.set_requires_grad(true);
        auto params = one_param(theta);
        auto st = AdamWState<double>::init(params, decay);
        adamw_step(params, st);
        CHECK(theta.data()[0] == doctest::Approx(0.99999).epsilon(1e-12));
    }
}

TEST_CASE("adamw matches a scalar reference over 100 random steps") {
    OptimConfig cfg;
    cfg.lr = 2e-3;
    cfg.weight_decay = 0.004;

    auto theta = DT::scalar(0.8);
    theta.set_requires_grad(true);
    auto params = one_param(theta);
    auto st = AdamWState<double>::init(params, cfg);

    double ref_theta = 0.8, m = 0, v = 0;
    Rng rng(13);
    for (int t = 1; t <= 100; ++t) {
        const double g = rng.gaussian();
        theta.zero_grad();
        theta.grad()[0] = g;
        adamw_step(params, st);

        ref_theta -= cfg.lr * cfg.weight_decay * ref_theta;
        m = cfg.beta1 * m + (1 - cfg.beta1) * g;
        v = cfg.beta2 * v + (1 - cfg.beta2) * g * g;
        const double mh = m / (1 - std::pow(cfg.beta1, t));
        const double vh = v / (1 - std::pow(cfg.beta2, t));
        ref_theta -= cfg.lr * mh / (std::sqrt(vh) + cfg.eps);

        REQUIRE(std::abs(theta.data()[0] - ref_theta) < 1e-7);
    }
}

TEST_CASE("adamw skips frozen rows and rejects NaN gradients") {
    auto table = DT::from({3, 2}, {0, 0, 1, 1, 2, 2});
    table.set_requires_grad(true);
    for (auto& g : table.grad()) g = 1.0;
    auto params = one_param(table, 1);
    OptimConfig cfg;
    auto st = AdamWState<double>::init(params, cfg);
    adamw_step(params, st);
    CHECK(table.data()[0] == 0.0);
    CHECK(table.data()[1] == 0.0);
    CHECK(table.data()[2] != 1.0);

    table.grad()[3] = std::nan("");
    CHECK_THROWS_AS(adamw_step(params, st), TrainingError);
    try {
        adamw_step(params, st);
    } catch (const TrainingError& e) {
        CHECK(std::string(e.what()).find("'p'") != std::string::npos);
    }
}

TEST_CASE("rank_of_target tie rule") {
    const double ninf = -std::numeric_limits<double>::infinity();
    std::vector<double> top = {ninf, 1.0, 9.0, 3.0};
    CHECK(rank_of_target<double>(top, 2) == 1);

    std::vector<double> tie = {ninf, 5.0, 9.0, 9.0};
    CHECK(rank_of_target<double>(tie, 3) == 2);
    CHECK(rank_of_target<double>(tie, 2) == 1);

    std::vector<double> low = {ninf, 5.0, 9.0, 1.0};
    CHECK(rank_of_target<double>(low, 3) == 3);

    CHECK_THROWS_AS(rank_of_target<double>(tie, 0), ContractError);
    CHECK_THROWS_AS(rank_of_target<double>(tie, 4), ContractError);

    // strictly increasing transforms leave every rank unchanged
    Rng rng(3);
    std::vector<double> scores(40);
    for (auto& s : scores) s = rng.gaussian();
    scores[0] = ninf;
    for (std::int64_t t = 1; t < 40; ++t) {
        const int r1 = rank_of_target<double>(scores, t);
        std::vector<double> mapped(40);
        for (std::size_t i = 0; i < 40; ++i) mapped[i] = std::atan(scores[i]) * 3.0 + 1.0;
        mapped[0] = ninf;
        CHECK(rank_of_target<double>(mapped, t) == r1);
    }
}

TEST_CASE("hit and ndcg") {
    auto [hr_all, ndcg_all] = hit_and_ndcg_at_k({1, 1, 1}, 10);
    CHECK(hr_all == 1.0);
    CHECK(ndcg_all == 1.0);

    auto [hr3, ndcg3] = hit_and_ndcg_at_k({3}, 10);
    CHECK(hr3 == 1.0);
    CHECK(ndcg3 == doctest::Approx(0.5).epsilon(1e-12));

    auto [hr_miss, ndcg_miss] = hit_and_ndcg_at_k({11}, 10);
    CHECK(hr_miss == 0.0);
    CHECK(ndcg_miss == 0.0);

    CHECK_THROWS_AS(hit_and_ndcg_at_k({}, 10), ContractError);

    // NDCG@K <= HR@K pointwise
    Rng rng(4);
    for (int rep = 0; rep < 20; ++rep) {
        std::vector<int> ranks;
        for (int i = 0; i < 50; ++i) ranks.push_back(1 + static_cast<int>(rng.uniform_index(30)));
        auto [hr, ndcg] = hit_and_ndcg_at_k(ranks, 10);
        CHECK(ndcg <= hr + 1e-15);
    }
}

TEST_CASE("evaluate equals the brute-force oracle, ties included") {
    auto split = synthetic_generate(100, 2, 8, 5);  // 200 items
    ModelConfig cfg;
    cfg.d = 12;
    cfg.d_state = 4;
    cfg.n_layers = 1;
    cfg.L = 8;
    cfg.vocab_items = static_cast<int>(split.num_items) + 1;
    cfg.vocab_attrs = static_cast<int>(split.num_attrs) + 1;
    cfg.seed = 5;
    Rng rng(cfg.seed);
    auto params = ModelParams<float>::init(cfg, rng);

    // force exact score ties involving actual test targets
    const std::size_t d = static_cast<std::size_t>(cfg.d);
    auto wd = params.cls_weight.data();
    for (std::size_t u = 0; u < 10; ++u) {
        const auto tgt = static_cast<std::size_t>(split.test_target[u]);
        const std::size_t partner = tgt == 1 ? 2 : tgt - 1;
        std::copy_n(wd.begin() + tgt * d, d, wd.begin() + partner * d);
    }

    auto [hr, ndcg] = evaluate(params, cfg, split, 10, 17);
    auto [bhr, bndcg] = brute_force_eval(params, cfg, split, 10);
    CHECK(hr == bhr);
    CHECK(ndcg == bndcg);
    CHECK(ndcg <= hr);
}

TEST_CASE("random model ranks uniformly: HR@10 near 10/(V-1)") {
    // 600-user spot check; the acceptance suite runs the full-size one
    auto split = synthetic_generate(300, 2, 8, 6);  // V-1 = 600 items
    ModelConfig cfg;
    cfg.d = 16;
    cfg.d_state = 4;
    cfg.n_layers = 1;
    cfg.L = 8;
    cfg.vocab_items = static_cast<int>(split.num_items) + 1;
    cfg.vocab_attrs = static_cast<int>(split.num_attrs) + 1;
    cfg.seed = 51;
    Rng rng(cfg.seed);
    auto params = ModelParams<float>::init(cfg, rng);

    auto [hr, ndcg] = evaluate(params, cfg, split, 10, 64);
    const double p = 10.0 / 600.0;
    const double se = std::sqrt(p * (1 - p) / 300.0);
    CHECK(hr >= p - 4 * se);
    CHECK(hr <= p + 4 * se);
    CHECK(ndcg <= hr);
}

TEST_CASE("train: determinism, epoch records, config validation") {
    auto split = synthetic_generate(16, 3, 12, 42);
    ModelConfig cfg;
    cfg.d = 12;
    cfg.d_state = 4;
    cfg.n_layers = 1;
    cfg.L = 12;
    cfg.vocab_items = static_cast<int>(split.num_items) + 1;
    cfg.vocab_attrs = static_cast<int>(split.num_attrs) + 1;
    cfg.seed = 42;

    auto run = [&](const std::string& log) {
        Rng rng(cfg.seed);
        auto params = ModelParams<float>::init(cfg, rng);
        TrainOptions opts;
        opts.epochs = 3;
        opts.batch_size = 8;
        opts.seed = 42;
        opts.metrics_path = log;
        return train(cfg, opts, split, params);
    };

    const std::string log1 = (fs::temp_directory_path() / "hmr_log1.jsonl").string();
    const std::string log2 = (fs::temp_directory_path() / "hmr_log2.jsonl").string();
    auto r1 = run(log1);
    auto r2 = run(log2);
    REQUIRE(r1.epochs.size() == 3);
    REQUIRE(r2.epochs.size() == 3);

    // identical metric logs once the wall-clock field is stripped
    auto strip = [](const std::string& path) {
        std::ifstream is(path);
        std::string line, out;
        while (std::getline(is, line)) {
            auto j = nlohmann::ordered_json::parse(line);
            j.erase("seconds");
            out += j.dump() + "\n";
        }
        return out;
    };
    CHECK(strip(log1) == strip(log2));
    fs::remove(log1);
    fs::remove(log2);

    ModelConfig bad_l = cfg;
    bad_l.L = 10;
    Rng rng(1);
    auto params = ModelParams<float>::init(bad_l, rng);
    TrainOptions opts;
    opts.epochs = 1;
    CHECK_THROWS_AS(train(bad_l, opts, split, params), ShapeError);

    ModelConfig bad_v = cfg;
    bad_v.vocab_items = 4;
    auto params_v = ModelParams<float>::init(bad_v, rng);
    CHECK_THROWS_AS(train(bad_v, opts, split, params_v), ConfigError);
}

TEST_CASE("bench produces sane records across modes") {
    ModelConfig cfg;
    cfg.d = 16;
    cfg.d_state = 4;
    cfg.n_layers = 1;
    cfg.L = 16;
    cfg.vocab_items = 40;
    cfg.vocab_attrs = 8;
    cfg.seed = 9;
    Rng rng(cfg.seed);
    auto params = ModelParams<float>::init(cfg, rng);

    for (auto mode : {BenchMode::Scan, BenchMode::Recurrent, BenchMode::Bundled}) {
        auto rec = bench(params, cfg, 32, mode, 5);
        CHECK(rec.latency_ms > 0.0);
        CHECK(rec.peak_bytes > 0);
        CHECK(rec.L == 32);
    }
    auto r64 = bench(params, cfg, 64, BenchMode::Recurrent, 5);
    auto r256 = bench(params, cfg, 256, BenchMode::Recurrent, 5);
    CHECK(r64.peak_bytes == r256.peak_bytes);

    // scan-mode transient memory grows at most linearly in L
    auto s128 = bench(params, cfg, 128, BenchMode::Scan, 5);
    auto s512 = bench(params, cfg, 512, BenchMode::Scan, 5);
    CHECK(s512.peak_bytes <= 4 * s128.peak_bytes + 4096);
    CHECK(s512.peak_bytes > s128.peak_bytes);

    auto json_line = bench_record_json(r64);
    auto parsed = nlohmann::json::parse(json_line);
    CHECK(parsed.at("mode") == "recurrent");
    CHECK(parsed.at("L") == 64);
    CHECK(parsed.at("latency_ms").is_number());
    CHECK(parsed.at("peak_bytes").is_number_unsigned());
}
