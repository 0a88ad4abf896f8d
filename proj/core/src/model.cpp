#include "hmr/model.hpp"

#include <algorithm>
#include <cmath>

#include "hmr/fft.hpp"

namespace hmr {

void ModelConfig::validate() const {
    if (d < 1 || d_state < 1 || n_layers < 1 || L < 1 || conv_width < 1 || bundle_k < 1)
        throw ConfigError("ModelConfig: d, d_state, n_layers, L, conv_width and bundle_k must all be >= 1");
    if (vocab_items < 2 || vocab_attrs < 2)
        throw ConfigError("ModelConfig: vocab sizes must be >= 2 (index 0 is padding)");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("ModelConfig: dropout must be in [0, 1)");
}

template <class T>
ModelParams<T> ModelParams<T>::init(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    const std::size_t d = static_cast<std::size_t>(cfg.d);
    ModelParams<T> p;
    p.item_table = gaussian<T>(rng, {static_cast<std::size_t>(cfg.vocab_items), d}, 0.02);
    std::fill_n(p.item_table.data().begin(), d, T(0));  // padding row
    p.attr_table = gaussian<T>(rng, {static_cast<std::size_t>(cfg.vocab_attrs), d}, 0.02);
    std::fill_n(p.attr_table.data().begin(), d, T(0));
    p.alpha = Tensor<T>::scalar(T(0.1));
    p.bind_gain = Tensor<T>::full({d}, T(1));
    p.bind_bias = Tensor<T>::zeros({d});
    p.roles = gaussian<T>(rng, {static_cast<std::size_t>(cfg.bundle_k), d},
                          1.0 / std::sqrt(static_cast<double>(d)));
    p.bundle_gain = Tensor<T>::full({d}, T(1));
    p.bundle_bias = Tensor<T>::zeros({d});
    p.blocks.reserve(static_cast<std::size_t>(cfg.n_layers));
    for (int i = 0; i < cfg.n_layers; ++i)
        p.blocks.push_back(SsmBlockParams<T>::init(d, static_cast<std::size_t>(cfg.d_state),
                                                   static_cast<std::size_t>(cfg.conv_width), rng));
    p.cls_weight = gaussian<T>(rng, {static_cast<std::size_t>(cfg.vocab_items), d}, 0.02);
    return p;
}

template <class T>
std::vector<std::pair<std::string, Tensor<T>*>> ModelParams<T>::named() {
    std::vector<std::pair<std::string, Tensor<T>*>> out = {
        {"item_embeddings", &item_table}, {"attr_embeddings", &attr_table},
        {"alpha", &alpha},                {"bind_norm_gain", &bind_gain},
        {"bind_norm_bias", &bind_bias},   {"roles", &roles},
        {"bundle_norm_gain", &bundle_gain}, {"bundle_norm_bias", &bundle_bias},
    };
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        const std::string prefix = "blocks." + std::to_string(i) + ".";
        auto& b = blocks[i];
        out.emplace_back(prefix + "w_in", &b.w_in);
        out.emplace_back(prefix + "conv_kernels", &b.conv_kernels);
        out.emplace_back(prefix + "conv_bias", &b.conv_bias);
        out.emplace_back(prefix + "w_ssm", &b.w_ssm);
        out.emplace_back(prefix + "delta_bias", &b.delta_bias);
        out.emplace_back(prefix + "a_log", &b.a_log);
        out.emplace_back(prefix + "skip", &b.skip);
        out.emplace_back(prefix + "w_out", &b.w_out);
        out.emplace_back(prefix + "norm_gain", &b.norm_gain);
        out.emplace_back(prefix + "norm_bias", &b.norm_bias);
    }
    out.emplace_back("cls_weight", &cls_weight);
    return out;
}

template <class T>
std::vector<std::pair<std::string, const Tensor<T>*>> ModelParams<T>::named() const {
    auto mutable_named = const_cast<ModelParams<T>*>(this)->named();
    std::vector<std::pair<std::string, const Tensor<T>*>> out;
    out.reserve(mutable_named.size());
    for (auto& [name, t] : mutable_named) out.emplace_back(name, t);
    return out;
}

template <class T>
std::vector<ParamRef<T>> ModelParams<T>::trainable(const ModelConfig& cfg) {
    std::vector<ParamRef<T>> out;
    out.push_back({"item_embeddings", &item_table, 1});
    if (cfg.use_binding) {
        out.push_back({"attr_embeddings", &attr_table, 1});
        out.push_back({"alpha", &alpha, 0});
        out.push_back({"bind_norm_gain", &bind_gain, 0});
        out.push_back({"bind_norm_bias", &bind_bias, 0});
    }
    if (cfg.use_compression) {
        out.push_back({"roles", &roles, 0});
        out.push_back({"bundle_norm_gain", &bundle_gain, 0});
        out.push_back({"bundle_norm_bias", &bundle_bias, 0});
    }
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        const std::string prefix = "blocks." + std::to_string(i) + ".";
        auto& b = blocks[i];
        out.push_back({prefix + "w_in", &b.w_in, 0});
        out.push_back({prefix + "conv_kernels", &b.conv_kernels, 0});
        out.push_back({prefix + "conv_bias", &b.conv_bias, 0});
        out.push_back({prefix + "w_ssm", &b.w_ssm, 0});
        out.push_back({prefix + "delta_bias", &b.delta_bias, 0});
        out.push_back({prefix + "a_log", &b.a_log, 0});
        out.push_back({prefix + "skip", &b.skip, 0});
        out.push_back({prefix + "w_out", &b.w_out, 0});
        out.push_back({prefix + "norm_gain", &b.norm_gain, 0});
        out.push_back({prefix + "norm_bias", &b.norm_bias, 0});
    }
    out.push_back({"cls_weight", &cls_weight, 0});
    return out;
}

namespace {

void check_sequences(const IntTensor& items, const IntTensor& attrs, std::size_t& batch, std::size_t& len) {
    if (items.shape != attrs.shape)
        throw ShapeError("model: item and attribute sequences must share a shape, got " +
                         shape_str(items.shape) + " vs " + shape_str(attrs.shape));
    if (items.shape.size() == 1) {
        batch = 1;
        len = items.shape[0];
    } else if (items.shape.size() == 2) {
        batch = items.shape[0];
        len = items.shape[1];
    } else {
        throw ShapeError("model: sequences must be [L] or [B,L], got " + shape_str(items.shape));
    }
    if (len == 0) throw ShapeError("model: empty sequence");
}

}  // namespace

template <class T>
Tensor<T> model_features(Tape<T>* tape, const IntTensor& items, const IntTensor& attrs,
                         const ModelParams<T>& params, const ModelConfig& cfg, bool training,
                         Rng* dropout_rng) {
    std::size_t batch, len;
    check_sequences(items, attrs, batch, len);
    const T eps = static_cast<T>(kNormEps);

    IntTensor flat_items(Shape{batch, len}, items.data);
    Tensor<T> item_emb = embedding_lookup(tape, params.item_table, flat_items);  // [B,L,d]

    Tensor<T> x;
    if (cfg.use_binding) {
        IntTensor flat_attrs(Shape{batch, len}, attrs.data);
        Tensor<T> attr_emb = embedding_lookup(tape, params.attr_table, flat_attrs);
        x = bind_embed(tape, item_emb, attr_emb, params.alpha, params.bind_gain, params.bind_bias, eps);
    } else {
        x = item_emb;
    }

    if (training && cfg.dropout > 0.0) {
        if (!dropout_rng) throw ConfigError("model_features: dropout requires an Rng in training mode");
        x = dropout(tape, x, cfg.dropout, *dropout_rng, true);
    }

    if (cfg.use_compression) {
        x = bundle_window(tape, x, params.roles, static_cast<std::size_t>(cfg.bundle_k), params.bundle_gain,
                          params.bundle_bias, eps);
    }

    return encoder_forward(tape, x, params.blocks, eps);
}

template <class T>
Tensor<T> model_forward(Tape<T>* tape, const IntTensor& items, const IntTensor& attrs,
                        const ModelParams<T>& params, const ModelConfig& cfg, bool training,
                        Rng* dropout_rng) {
    Tensor<T> feats = model_features(tape, items, attrs, params, cfg, training, dropout_rng);
    const std::size_t batch = feats.dim(0), lp = feats.dim(1), d = feats.dim(2);
    Tensor<T> logits = matmul_nt(tape, feats.reshape({batch * lp, d}), params.cls_weight);
    return logits.reshape({batch, lp, static_cast<std::size_t>(cfg.vocab_items)});
}

template <class T>
Tensor<T> model_final_logits(const IntTensor& items, const IntTensor& attrs, const ModelParams<T>& params,
                             const ModelConfig& cfg) {
    Tensor<T> feats = model_features<T>(nullptr, items, attrs, params, cfg);
    const std::size_t batch = feats.dim(0), lp = feats.dim(1), d = feats.dim(2);
    Tensor<T> last = Tensor<T>::zeros({batch, d});
    auto fd = feats.data();
    auto ld = last.data();
    for (std::size_t b = 0; b < batch; ++b)
        std::copy_n(fd.begin() + (b * lp + lp - 1) * d, d, ld.begin() + b * d);
    return matmul_nt<T>(nullptr, last, params.cls_weight);
}

template <class T>
Tensor<T> loss_masked(Tape<T>* tape, const Tensor<T>& logits, const IntTensor& targets) {
    return masked_cross_entropy(tape, logits, targets);
}

template <class T>
std::vector<std::int64_t> predict_topk(const IntTensor& items, const IntTensor& attrs, int k,
                                       const ModelParams<T>& params, const ModelConfig& cfg) {
    if (k < 1 || k >= cfg.vocab_items)
        throw ConfigError("predict_topk: k must be in [1, vocab_items), got " + std::to_string(k));
    Tensor<T> logits = model_final_logits(items, attrs, params, cfg);
    auto row = logits.data();
    const std::size_t v = static_cast<std::size_t>(cfg.vocab_items);
    std::vector<std::int64_t> ids(v - 1);
    for (std::size_t i = 1; i < v; ++i) ids[i - 1] = static_cast<std::int64_t>(i);
    auto better = [&](std::int64_t a, std::int64_t b) {
        T sa = row[static_cast<std::size_t>(a)], sb = row[static_cast<std::size_t>(b)];
        if (sa != sb) return sa > sb;
        return a < b;
    };
    std::partial_sort(ids.begin(), ids.begin() + k, ids.end(), better);
    ids.resize(static_cast<std::size_t>(k));
    return ids;
}

template <class T>
std::vector<T> forward_recurrent(const IntTensor& items, const IntTensor& attrs,
                                 const ModelParams<T>& params, const ModelConfig& cfg,
                                 ModelState<T>* state_out) {
    std::size_t batch, len;
    check_sequences(items, attrs, batch, len);
    if (batch != 1) throw ShapeError("forward_recurrent: one sequence at a time");
    const std::size_t d = static_cast<std::size_t>(cfg.d);
    const std::size_t v_items = static_cast<std::size_t>(cfg.vocab_items);
    const std::size_t v_attrs = static_cast<std::size_t>(cfg.vocab_attrs);
    const std::size_t k = static_cast<std::size_t>(cfg.bundle_k);
    const T eps = static_cast<T>(kNormEps);

    ModelState<T> state;
    state.blocks.reserve(params.blocks.size());
    for (const auto& b : params.blocks)
        state.blocks.push_back(BlockState<T>::zeros(d, b.state_dim(), b.conv_width()));
    if (cfg.use_compression) state.window_buf.resize(k * d);

    auto item_d = params.item_table.data();
    auto attr_d = params.attr_table.data();
    const T alpha = params.alpha.data()[0];
    auto bg = params.bind_gain.data();
    auto bb = params.bind_bias.data();

    std::vector<T> bound(d), y(d), y_next(d);
    bool have_output = false;

    auto norm_row = [&](std::span<T> row, std::span<const T> gain, std::span<const T> bias) {
        double m = 0;
        for (std::size_t j = 0; j < d; ++j) m += row[j];
        m /= static_cast<double>(d);
        double var = 0;
        for (std::size_t j = 0; j < d; ++j) {
            double c = row[j] - m;
            var += c * c;
        }
        var /= static_cast<double>(d);
        T is = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
        for (std::size_t j = 0; j < d; ++j) row[j] = gain[j] * static_cast<T>(row[j] - m) * is + bias[j];
    };

    auto encode_token = [&](std::span<const T> token) {
        std::copy(token.begin(), token.end(), y.begin());
        for (std::size_t bi = 0; bi < params.blocks.size(); ++bi) {
            block_step<T>(y, state.blocks[bi], params.blocks[bi], eps, y_next);
            std::swap(y, y_next);
        }
        have_output = true;
    };

    auto flush_window = [&]() {
        if (state.window_fill == 0) return;
        std::vector<T> conv_out(state.window_fill * d);
        fft::circ_conv_batch<T>(params.roles.data().data(), state.window_buf.data(), conv_out.data(),
                                state.window_fill, d);
        std::vector<T> win(d, T(0));
        for (std::size_t m = 0; m < state.window_fill; ++m)
            for (std::size_t i = 0; i < d; ++i) win[i] += conv_out[m * d + i];
        norm_row(win, params.bundle_gain.data(), params.bundle_bias.data());
        encode_token(win);
        state.window_fill = 0;
    };

    for (std::size_t t = 0; t < len; ++t) {
        const std::int64_t item = items.at(t);
        const std::int64_t attr = attrs.at(t);
        if (item < 0 || static_cast<std::size_t>(item) >= v_items)
            throw IndexError("forward_recurrent: item index " + std::to_string(item) + " out of range [0, " +
                             std::to_string(v_items) + ")");
        const T* erow = item_d.data() + static_cast<std::size_t>(item) * d;
        if (cfg.use_binding) {
            if (attr < 0 || static_cast<std::size_t>(attr) >= v_attrs)
                throw IndexError("forward_recurrent: attr index " + std::to_string(attr) +
                                 " out of range [0, " + std::to_string(v_attrs) + ")");
            const T* arow = attr_d.data() + static_cast<std::size_t>(attr) * d;
            std::vector<T> conv(d);
            fft::circ_conv_batch<T>(erow, arow, conv.data(), 1, d);
            for (std::size_t i = 0; i < d; ++i) bound[i] = erow[i] + alpha * conv[i];
            norm_row(bound, bg, bb);
        } else {
            std::copy_n(erow, d, bound.begin());
        }

        if (cfg.use_compression) {
            std::copy_n(bound.begin(), d, state.window_buf.begin() + state.window_fill * d);
            if (++state.window_fill == k) flush_window();
        } else {
            encode_token(bound);
        }
    }
    if (cfg.use_compression) flush_window();
    if (!have_output) throw ContractError("forward_recurrent: no encoder steps were taken");

    std::vector<T> logits(v_items);
    auto wd = params.cls_weight.data();
    for (std::size_t i = 0; i < v_items; ++i) {
        const T* row = wd.data() + i * d;
        T acc = T(0);
        for (std::size_t j = 0; j < d; ++j) acc += y[j] * row[j];
        logits[i] = acc;
    }
    if (state_out) *state_out = std::move(state);
    return logits;
}

std::vector<std::int64_t> window_targets(std::span<const std::int64_t> inputs,
                                         std::span<const std::int64_t> targets, std::size_t k) {
    if (k == 0) throw ConfigError("window_targets: k must be >= 1");
    if (inputs.size() != targets.size())
        throw ShapeError("window_targets: inputs and targets lengths differ");
    const std::size_t len = inputs.size();
    const std::size_t wcount = bundle_length(len, k);
    std::vector<std::int64_t> out(wcount, 0);
    for (std::size_t j = 0; j < wcount; ++j) {
        const std::size_t lo = j * k;
        const std::size_t hi = std::min(lo + k, len);
        bool any_real = false;
        for (std::size_t t = lo; t < hi; ++t) any_real |= inputs[t] != 0;
        out[j] = any_real ? targets[hi - 1] : 0;
    }
    return out;
}

#define HMR_INSTANTIATE_MODEL(T)                                                                           \
    template struct ModelParams<T>;                                                                        \
    template Tensor<T> model_features<T>(Tape<T>*, const IntTensor&, const IntTensor&,                     \
                                         const ModelParams<T>&, const ModelConfig&, bool, Rng*);           \
    template Tensor<T> model_forward<T>(Tape<T>*, const IntTensor&, const IntTensor&,                      \
                                        const ModelParams<T>&, const ModelConfig&, bool, Rng*);            \
    template Tensor<T> model_final_logits<T>(const IntTensor&, const IntTensor&, const ModelParams<T>&,    \
                                             const ModelConfig&);                                          \
    template Tensor<T> loss_masked<T>(Tape<T>*, const Tensor<T>&, const IntTensor&);                       \
    template std::vector<std::int64_t> predict_topk<T>(const IntTensor&, const IntTensor&, int,            \
                                                       const ModelParams<T>&, const ModelConfig&);         \
    template std::vector<T> forward_recurrent<T>(const IntTensor&, const IntTensor&,                       \
                                                 const ModelParams<T>&, const ModelConfig&,                \
                                                 ModelState<T>*);

HMR_INSTANTIATE_MODEL(float)
HMR_INSTANTIATE_MODEL(double)

}  // namespace hmr
