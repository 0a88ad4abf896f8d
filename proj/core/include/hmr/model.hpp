#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "hmr/hrr.hpp"
#include "hmr/ssm.hpp"

namespace hmr {

inline constexpr double kNormEps = 1e-5;

struct ModelConfig {
    int d = 96;
    int d_state = 16;
    int n_layers = 2;
    int L = 50;
    int conv_width = 4;
    bool use_binding = true;
    bool use_compression = false;
    int bundle_k = 4;
    int vocab_items = 0;
    int vocab_attrs = 0;
    double dropout = 0.0;
    std::uint64_t seed = 42;

    void validate() const;
};

template <class T>
struct ParamRef {
    std::string name;
    Tensor<T>* tensor;
    std::size_t frozen_rows = 0;  // leading rows excluded from optimizer updates
};

template <class T>
struct ModelParams {
    Tensor<T> item_table;   // [vocab_items, d], row 0 frozen at zero
    Tensor<T> attr_table;   // [vocab_attrs, d], row 0 frozen at zero
    Tensor<T> alpha;        // [1], binding strength
    Tensor<T> bind_gain, bind_bias;      // [d]
    Tensor<T> roles;                     // [bundle_k, d]
    Tensor<T> bundle_gain, bundle_bias;  // [d]
    std::vector<SsmBlockParams<T>> blocks;
    Tensor<T> cls_weight;  // [vocab_items, d]

    static ModelParams init(const ModelConfig& cfg, Rng& rng);

    // Every named array, in checkpoint order.
    std::vector<std::pair<std::string, Tensor<T>*>> named();
    std::vector<std::pair<std::string, const Tensor<T>*>> named() const;

    // Parameters updated by the optimizer under this configuration;
    // arrays unused by the active mode (attribute path with binding off,
    // roles with compression off) are left untouched.
    std::vector<ParamRef<T>> trainable(const ModelConfig& cfg);
};

// Embeds, binds (skipped entirely when use_binding is off), optionally
// bundles, encodes. items/attrs are [B,L] (or [L] for one sequence);
// output is [B, L', d] with L' = ceil(L/bundle_k) under compression.
template <class T>
Tensor<T> model_features(Tape<T>* tape, const IntTensor& items, const IntTensor& attrs,
                         const ModelParams<T>& params, const ModelConfig& cfg, bool training = false,
                         Rng* dropout_rng = nullptr);

// Features projected to item logits at every position: [B, L', V].
template <class T>
Tensor<T> model_forward(Tape<T>* tape, const IntTensor& items, const IntTensor& attrs,
                        const ModelParams<T>& params, const ModelConfig& cfg, bool training = false,
                        Rng* dropout_rng = nullptr);

// Final-position logits only ([B, V]); the evaluation/inference path.
template <class T>
Tensor<T> model_final_logits(const IntTensor& items, const IntTensor& attrs, const ModelParams<T>& params,
                             const ModelConfig& cfg);

// Mean over non-padding targets of -log softmax(logits)[target].
template <class T>
Tensor<T> loss_masked(Tape<T>* tape, const Tensor<T>& logits, const IntTensor& targets);

// Top-k item ids from the final position, with index 0 masked out and
// ties broken toward the smaller id.
template <class T>
std::vector<std::int64_t> predict_topk(const IntTensor& items, const IntTensor& attrs, int k,
                                       const ModelParams<T>& params, const ModelConfig& cfg);

// Constant-memory stepping state for one sequence.
template <class T>
struct ModelState {
    std::vector<BlockState<T>> blocks;
    std::vector<T> window_buf;  // up to bundle_k bound tokens
    std::size_t window_fill = 0;
    std::size_t bytes() const {
        std::size_t b = window_buf.capacity() * sizeof(T);
        for (const auto& s : blocks) b += s.bytes();
        return b;
    }
};

// Recurrent inference over one sequence; returns final-position logits.
// With compression on, steps the encoder once per bundled window.
template <class T>
std::vector<T> forward_recurrent(const IntTensor& items, const IntTensor& attrs,
                                 const ModelParams<T>& params, const ModelConfig& cfg,
                                 ModelState<T>* state_out = nullptr);

// Window-level target alignment for compressed training: each window
// takes the target of its last constituent position, and a window whose
// inputs are all padding is masked (target 0).
std::vector<std::int64_t> window_targets(std::span<const std::int64_t> inputs,
                                         std::span<const std::int64_t> targets, std::size_t k);

}  // namespace hmr
