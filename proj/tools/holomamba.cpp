// holomamba CLI: ingest | train | eval | bench over a flat JSON config.
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric/training
// error.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>

#include <CLI11.hpp>
#include <json.hpp>

#include "hmr/checkpoint.hpp"
#include "hmr/data.hpp"
#include "hmr/model.hpp"
#include "hmr/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

struct RunConfig {
    hmr::ModelConfig model;
    hmr::OptimConfig optim;
    int epochs = 10;
    int batch_size = 64;
    std::string dataset = "synthetic";  // movielens | amazon | synthetic
    std::string ratings_path = "data/ml-1m/ratings.dat";
    std::string movies_path = "data/ml-1m/movies.dat";
    std::string amazon_path = "data/reviews_Beauty_5.json.gz";
    std::string split_path;  // defaults to <out>/<dataset>.split
    std::string out_dir = "out";
    std::string checkpoint;  // defaults to <out>/model.ckpt
    int synthetic_users = 32;
    int synthetic_cycle = 3;
    bool eval_only = false;
    bool compressed_eval = false;
};

const std::set<std::string> kKnownKeys = {
    "d",          "d_state",        "n_layers",     "L",           "conv_width",  "use_binding",
    "use_compression", "bundle_k",  "dropout",      "seed",        "lr",          "beta1",
    "beta2",      "adam_eps",       "weight_decay", "epochs",      "batch_size",  "dataset",
    "ratings_path", "movies_path",  "amazon_path",  "split_path",  "out_dir",     "checkpoint",
    "synthetic_users", "synthetic_cycle", "eval_only", "compressed_eval"};

void apply_json(RunConfig& rc, const json& j) {
    for (const auto& [key, value] : j.items()) {
        if (!kKnownKeys.count(key)) throw hmr::ConfigError("config: unknown key '" + key + "'");
        if (key == "d") rc.model.d = value.get<int>();
        else if (key == "d_state") rc.model.d_state = value.get<int>();
        else if (key == "n_layers") rc.model.n_layers = value.get<int>();
        else if (key == "L") rc.model.L = value.get<int>();
        else if (key == "conv_width") rc.model.conv_width = value.get<int>();
        else if (key == "use_binding") rc.model.use_binding = value.get<bool>();
        else if (key == "use_compression") rc.model.use_compression = value.get<bool>();
        else if (key == "bundle_k") rc.model.bundle_k = value.get<int>();
        else if (key == "dropout") rc.model.dropout = value.get<double>();
        else if (key == "seed") rc.model.seed = value.get<std::uint64_t>();
        else if (key == "lr") rc.optim.lr = value.get<double>();
        else if (key == "beta1") rc.optim.beta1 = value.get<double>();
        else if (key == "beta2") rc.optim.beta2 = value.get<double>();
        else if (key == "adam_eps") rc.optim.eps = value.get<double>();
        else if (key == "weight_decay") rc.optim.weight_decay = value.get<double>();
        else if (key == "epochs") rc.epochs = value.get<int>();
        else if (key == "batch_size") rc.batch_size = value.get<int>();
        else if (key == "dataset") rc.dataset = value.get<std::string>();
        else if (key == "ratings_path") rc.ratings_path = value.get<std::string>();
        else if (key == "movies_path") rc.movies_path = value.get<std::string>();
        else if (key == "amazon_path") rc.amazon_path = value.get<std::string>();
        else if (key == "split_path") rc.split_path = value.get<std::string>();
        else if (key == "out_dir") rc.out_dir = value.get<std::string>();
        else if (key == "checkpoint") rc.checkpoint = value.get<std::string>();
        else if (key == "synthetic_users") rc.synthetic_users = value.get<int>();
        else if (key == "synthetic_cycle") rc.synthetic_cycle = value.get<int>();
        else if (key == "eval_only") rc.eval_only = value.get<bool>();
        else if (key == "compressed_eval") rc.compressed_eval = value.get<bool>();
    }
}

ordered_json resolved_json(const RunConfig& rc) {
    ordered_json j;
    j["d"] = rc.model.d;
    j["d_state"] = rc.model.d_state;
    j["n_layers"] = rc.model.n_layers;
    j["L"] = rc.model.L;
    j["conv_width"] = rc.model.conv_width;
    j["use_binding"] = rc.model.use_binding;
    j["use_compression"] = rc.model.use_compression;
    j["bundle_k"] = rc.model.bundle_k;
    j["dropout"] = rc.model.dropout;
    j["seed"] = rc.model.seed;
    j["lr"] = rc.optim.lr;
    j["beta1"] = rc.optim.beta1;
    j["beta2"] = rc.optim.beta2;
    j["adam_eps"] = rc.optim.eps;
    j["weight_decay"] = rc.optim.weight_decay;
    j["epochs"] = rc.epochs;
    j["batch_size"] = rc.batch_size;
    j["dataset"] = rc.dataset;
    j["ratings_path"] = rc.ratings_path;
    j["movies_path"] = rc.movies_path;
    j["amazon_path"] = rc.amazon_path;
    j["split_path"] = rc.split_path;
    j["out_dir"] = rc.out_dir;
    j["checkpoint"] = rc.checkpoint;
    j["synthetic_users"] = rc.synthetic_users;
    j["synthetic_cycle"] = rc.synthetic_cycle;
    j["eval_only"] = rc.eval_only;
    j["compressed_eval"] = rc.compressed_eval;
    return j;
}

void resolve_paths(RunConfig& rc) {
    if (rc.split_path.empty()) rc.split_path = (fs::path(rc.out_dir) / (rc.dataset + ".split")).string();
    if (rc.checkpoint.empty()) rc.checkpoint = (fs::path(rc.out_dir) / "model.ckpt").string();
}

void echo_config(const RunConfig& rc, const std::string& command) {
    fs::create_directories(rc.out_dir);
    std::ofstream os(fs::path(rc.out_dir) / ("config." + command + ".json"), std::ios::trunc);
    if (!os) throw hmr::IoError("cannot write config echo under " + rc.out_dir);
    os << resolved_json(rc).dump(2) << "\n";
}

hmr::DatasetSplit build_split(const RunConfig& rc) {
    if (rc.dataset == "synthetic")
        return hmr::synthetic_generate(rc.synthetic_users, rc.synthetic_cycle, rc.model.L, rc.model.seed);
    if (rc.dataset == "movielens") {
        auto raw = hmr::ingest_movielens(rc.ratings_path, rc.movies_path);
        std::cout << "movielens: " << raw.ratings_stats.interactions << " interactions, "
                  << raw.ratings_stats.malformed << " malformed lines skipped\n";
        auto kept = hmr::five_core_filter(std::move(raw.interactions));
        std::cout << "five-core: " << kept.size() << " interactions retained\n";
        return hmr::build_sequences(kept, rc.model.L, hmr::AttrScheme::FirstGenre, &raw.item_first_genre);
    }
    if (rc.dataset == "amazon") {
        auto raw = hmr::ingest_amazon(rc.amazon_path);
        std::cout << "amazon: " << raw.stats.interactions << " interactions, " << raw.stats.malformed
                  << " malformed lines skipped\n";
        auto kept = hmr::five_core_filter(std::move(raw.interactions));
        std::cout << "five-core: " << kept.size() << " interactions retained\n";
        return hmr::build_sequences(kept, rc.model.L, hmr::AttrScheme::HashBuckets);
    }
    throw hmr::ConfigError("dataset must be one of movielens | amazon | synthetic, got '" + rc.dataset + "'");
}

hmr::DatasetSplit load_or_build_split(const RunConfig& rc) {
    if (fs::exists(rc.split_path)) return hmr::load_split(rc.split_path);
    if (rc.dataset == "synthetic") return build_split(rc);
    throw hmr::DataError("no cached split at " + rc.split_path + "; run `holomamba ingest` first");
}

void finish_model_config(RunConfig& rc, const hmr::DatasetSplit& split) {
    rc.model.vocab_items = static_cast<int>(split.num_items) + 1;
    rc.model.vocab_attrs = static_cast<int>(split.num_attrs) + 1;
    if (split.L != rc.model.L)
        throw hmr::ConfigError("cached split was built with L=" + std::to_string(split.L) +
                               " but config asks for L=" + std::to_string(rc.model.L));
}

int cmd_ingest(RunConfig rc) {
    resolve_paths(rc);
    echo_config(rc, "ingest");
    hmr::DatasetSplit split = build_split(rc);
    fs::create_directories(fs::path(rc.split_path).parent_path());
    hmr::save_split(rc.split_path, split);
    std::cout << "users " << split.num_users << " (dropped " << split.users_dropped << "), items "
              << split.num_items << ", attrs " << split.num_attrs << ", L " << split.L << "\n"
              << "split cached to " << rc.split_path << "\n";
    return 0;
}

int cmd_eval(RunConfig rc);

int cmd_train(RunConfig rc) {
    if (rc.eval_only) return cmd_eval(std::move(rc));
    resolve_paths(rc);
    hmr::DatasetSplit split = load_or_build_split(rc);
    finish_model_config(rc, split);
    echo_config(rc, "train");

    hmr::Rng rng(rc.model.seed);
    auto params = hmr::ModelParams<float>::init(rc.model, rng);

    hmr::TrainOptions opts;
    opts.epochs = rc.epochs;
    opts.batch_size = rc.batch_size;
    opts.optim = rc.optim;
    opts.seed = rc.model.seed;
    opts.metrics_path = (fs::path(rc.out_dir) / "metrics.jsonl").string();
    opts.verbose = true;

    auto result = hmr::train(rc.model, opts, split, params);
    hmr::save_model(rc.checkpoint, params);
    hmr::save_model_config(rc.checkpoint + ".json", rc.model);

    const auto& last = result.epochs.back();
    std::cout << "final epoch " << last.epoch << ": loss " << last.loss << ", HR@10 " << last.hr10
              << ", NDCG@10 " << last.ndcg10 << "\n"
              << "checkpoint " << rc.checkpoint << "\nmetrics " << opts.metrics_path << "\n";
    return 0;
}

int cmd_eval(RunConfig rc) {
    resolve_paths(rc);
    hmr::DatasetSplit split = load_or_build_split(rc);
    finish_model_config(rc, split);

    hmr::ModelConfig stored = hmr::load_model_config(rc.checkpoint + ".json");
    if (stored.vocab_items != rc.model.vocab_items || stored.vocab_attrs != rc.model.vocab_attrs)
        throw hmr::ConfigError("checkpoint was trained with vocab " + std::to_string(stored.vocab_items) +
                               "/" + std::to_string(stored.vocab_attrs) + " but the split needs " +
                               std::to_string(rc.model.vocab_items) + "/" +
                               std::to_string(rc.model.vocab_attrs));
    hmr::ModelConfig eval_cfg = stored;
    if (rc.compressed_eval) eval_cfg.use_compression = true;
    echo_config(rc, "eval");

    auto params = hmr::load_model<float>(rc.checkpoint, stored);
    auto [hr, ndcg] = hmr::evaluate(params, eval_cfg, split, 10, rc.batch_size);

    ordered_json j;
    j["hr10"] = hr;
    j["ndcg10"] = ndcg;
    j["compressed"] = rc.compressed_eval;
    std::cout << j.dump() << "\n";
    std::ofstream os(fs::path(rc.out_dir) / "eval.json", std::ios::trunc);
    os << j.dump(2) << "\n";
    return 0;
}

int cmd_bench(RunConfig rc) {
    resolve_paths(rc);
    hmr::ModelConfig stored = hmr::load_model_config(rc.checkpoint + ".json");
    echo_config(rc, "bench");
    auto params = hmr::load_model<float>(rc.checkpoint, stored);

    fs::create_directories(rc.out_dir);
    std::ofstream os(fs::path(rc.out_dir) / "bench.jsonl", std::ios::trunc);
    for (int L : {50, 256, 512}) {
        for (auto mode : {hmr::BenchMode::Scan, hmr::BenchMode::Recurrent, hmr::BenchMode::Bundled}) {
            auto rec = hmr::bench(params, stored, L, mode, 20);
            std::string line = hmr::bench_record_json(rec);
            std::cout << line << "\n";
            os << line << "\n";
        }
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"holomamba: sequential recommender with holographic item-attribute binding and a "
                 "selective state-space encoder"};
    app.require_subcommand(1);

    std::string config_path;

    RunConfig rc;
    std::optional<std::string> dataset;
    std::optional<std::uint64_t> seed;
    std::optional<int> epochs, layers, bundle_k;
    std::optional<bool> use_binding, use_compression;
    std::optional<std::string> out_dir, checkpoint;
    bool compressed_flag = false;

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "JSON config file (flat keys; flags override)");
        cmd->add_option("--dataset", dataset, "movielens | amazon | synthetic");
        cmd->add_option("--seed", seed, "run seed");
        cmd->add_option("--epochs", epochs, "training epochs");
        cmd->add_option("--layers", layers, "encoder blocks");
        cmd->add_option("--use-binding", use_binding, "holographic item-attribute binding");
        cmd->add_option("--use-compression", use_compression, "window-level bundling during training");
        cmd->add_option("--bundle-k", bundle_k, "bundling window size");
        cmd->add_option("--out", out_dir, "output directory");
        cmd->add_option("--checkpoint", checkpoint, "checkpoint path");
    };

    CLI::App* ingest = app.add_subcommand("ingest", "parse raw files and cache the dataset split");
    CLI::App* trainc = app.add_subcommand("train", "train and checkpoint a model");
    CLI::App* evalc = app.add_subcommand("eval", "evaluate a checkpoint (HR@10 / NDCG@10)");
    CLI::App* benchc = app.add_subcommand("bench", "latency/memory benchmark across modes and lengths");
    for (auto* cmd : {ingest, trainc, evalc, benchc}) add_common(cmd);
    evalc->add_flag("--compressed", compressed_flag, "evaluate with window-level bundling at inference");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    try {
        if (!config_path.empty()) {
            std::ifstream is(config_path);
            if (!is) throw hmr::IoError("cannot open config " + config_path);
            json j;
            try {
                is >> j;
            } catch (const json::exception& e) {
                throw hmr::ConfigError("config: invalid JSON: " + std::string(e.what()));
            }
            apply_json(rc, j);
        }
        if (dataset) rc.dataset = *dataset;
        if (seed) rc.model.seed = *seed;
        if (epochs) rc.epochs = *epochs;
        if (layers) rc.model.n_layers = *layers;
        if (use_binding) rc.model.use_binding = *use_binding;
        if (use_compression) rc.model.use_compression = *use_compression;
        if (bundle_k) rc.model.bundle_k = *bundle_k;
        if (out_dir) rc.out_dir = *out_dir;
        if (checkpoint) rc.checkpoint = *checkpoint;
        rc.compressed_eval = rc.compressed_eval || compressed_flag;
        if (evalc->parsed() && use_compression && *use_compression) rc.compressed_eval = true;

        if (ingest->parsed()) return cmd_ingest(rc);
        if (trainc->parsed()) return cmd_train(rc);
        if (evalc->parsed()) return cmd_eval(rc);
        if (benchc->parsed()) return cmd_bench(rc);
        return 1;
    } catch (const hmr::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const hmr::DataError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const hmr::IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const hmr::IndexError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const hmr::TrainingError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const hmr::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
}
