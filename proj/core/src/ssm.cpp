#include "hmr/ssm.hpp"

#include <cmath>

namespace hmr {

template <class T>
SsmBlockParams<T> SsmBlockParams<T>::init(std::size_t d, std::size_t n, std::size_t conv_w, Rng& rng) {
    if (d < 1 || n < 1 || conv_w < 1) throw ConfigError("SsmBlockParams: d, n and conv width must be >= 1");
    SsmBlockParams<T> p;
    p.w_in = gaussian<T>(rng, {d, 2 * d}, 0.02);
    p.conv_kernels = gaussian<T>(rng, {conv_w, d}, 0.02);
    p.conv_bias = Tensor<T>::zeros({d});
    p.w_ssm = gaussian<T>(rng, {d, d + 2 * n}, 0.02);

    // Start the step size in a small stable regime: delta_bias is the
    // softplus-inverse of values log-uniform in [1e-3, 1e-1].
    p.delta_bias = Tensor<T>::zeros({d});
    for (auto& v : p.delta_bias.data()) {
        double dt = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
        v = static_cast<T>(std::log(std::expm1(dt)));
    }

    // Multi-timescale decay spectrum: A[c,s] = s+1.
    p.a_log = Tensor<T>::zeros({d, n});
    {
        auto ad = p.a_log.data();
        for (std::size_t c = 0; c < d; ++c)
            for (std::size_t s = 0; s < n; ++s) ad[c * n + s] = static_cast<T>(std::log(static_cast<double>(s + 1)));
    }

    p.skip = Tensor<T>::full({d}, T(1));
    p.w_out = gaussian<T>(rng, {d, d}, 1.0 / std::sqrt(static_cast<double>(d)));
    p.norm_gain = Tensor<T>::full({d}, T(1));
    p.norm_bias = Tensor<T>::zeros({d});
    return p;
}

template <class T>
void SsmBlockParams<T>::set_requires_grad(bool on) {
    for (Tensor<T>* t : {&w_in, &conv_kernels, &conv_bias, &w_ssm, &delta_bias, &a_log, &skip, &w_out,
                         &norm_gain, &norm_bias})
        t->set_requires_grad(on);
}

template <class T>
Tensor<T> block_forward_scan(Tape<T>* tape, const Tensor<T>& x, const SsmBlockParams<T>& params, T eps) {
    std::size_t batch = 1, len, d;
    if (x.rank() == 2) {
        len = x.dim(0);
        d = x.dim(1);
    } else if (x.rank() == 3) {
        batch = x.dim(0);
        len = x.dim(1);
        d = x.dim(2);
    } else {
        throw ShapeError("block_forward_scan: expected [L,d] or [B,L,d], got " + shape_str(x.shape()));
    }
    if (d != params.dim())
        throw ShapeError("block_forward_scan: input width " + std::to_string(d) + " != block width " +
                         std::to_string(params.dim()));
    const std::size_t n = params.state_dim();
    const std::size_t rows = batch * len;

    Tensor<T> xn = layer_norm(tape, x, params.norm_gain, params.norm_bias, eps);
    Tensor<T> proj = matmul(tape, xn.reshape({rows, d}), params.w_in);
    auto in_gate = split_last(tape, proj, {d, d});
    Tensor<T> conv_in = in_gate[0].reshape({batch, len, d});
    Tensor<T> gate = in_gate[1];

    Tensor<T> u = causal_depthwise_conv1d(tape, conv_in, params.conv_kernels, params.conv_bias);
    Tensor<T> ssm_in = matmul(tape, u.reshape({rows, d}), params.w_ssm);
    auto parts = split_last(tape, ssm_in, {d, n, n});
    Tensor<T> delta = softplus(tape, add(tape, parts[0], params.delta_bias));
    Tensor<T> a_pos = exp(tape, params.a_log);

    Tensor<T> r = selective_scan(tape, u, delta.reshape({batch, len, d}), parts[1].reshape({batch, len, n}),
                                 parts[2].reshape({batch, len, n}), a_pos, params.skip);

    Tensor<T> gated = mul(tape, silu(tape, gate), r.reshape({rows, d}));
    Tensor<T> out = matmul(tape, gated, params.w_out);
    return add(tape, x, out.reshape(Shape(x.shape())));
}

template <class T>
void block_step(std::span<const T> x_t, BlockState<T>& state, const SsmBlockParams<T>& params, T eps,
                std::span<T> y_t) {
    const std::size_t d = params.dim();
    const std::size_t n = params.state_dim();
    const std::size_t w = params.conv_width();
    if (x_t.size() != d || y_t.size() != d)
        throw ShapeError("block_step: row width " + std::to_string(x_t.size()) + " != block width " +
                         std::to_string(d));

    // pre-norm (same double accumulation as the layer_norm op)
    std::vector<T> xn(d);
    {
        double m = 0;
        for (std::size_t j = 0; j < d; ++j) m += x_t[j];
        m /= static_cast<double>(d);
        double var = 0;
        for (std::size_t j = 0; j < d; ++j) {
            double c = x_t[j] - m;
            var += c * c;
        }
        var /= static_cast<double>(d);
        T is = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
        auto gd = params.norm_gain.data();
        auto bd = params.norm_bias.data();
        for (std::size_t j = 0; j < d; ++j) xn[j] = gd[j] * static_cast<T>(x_t[j] - m) * is + bd[j];
    }

    // input/gate projection: row * w_in
    std::vector<T> xhat(d), gate(d);
    {
        auto wd = params.w_in.data();
        for (std::size_t j = 0; j < 2 * d; ++j) {
            T acc = T(0);
            for (std::size_t kk = 0; kk < d; ++kk) acc += xn[kk] * wd[kk * 2 * d + j];
            (j < d ? xhat[j] : gate[j - d]) = acc;
        }
    }

    // causal conv via the ring buffer (ring rows: oldest first)
    std::vector<T> u(d);
    {
        auto kd = params.conv_kernels.data();
        auto bd = params.conv_bias.data();
        auto ring = state.ring.data();
        for (std::size_t c = 0; c < d; ++c) {
            T acc = bd[c] + kd[(w - 1) * d + c] * xhat[c];
            for (std::size_t j = 0; j + 1 < w; ++j) acc += kd[j * d + c] * ring[j * d + c];
            u[c] = acc;
        }
        // shift in the new input
        if (w > 1) {
            for (std::size_t j = 0; j + 2 < w; ++j)
                std::copy_n(ring.begin() + (j + 1) * d, d, ring.begin() + j * d);
            std::copy_n(xhat.begin(), d, ring.begin() + (w - 2) * d);
        }
    }

    // state-space parameters: row * w_ssm -> (delta_pre, B, C)
    std::vector<T> delta(d), bvec(n), cvec(n);
    {
        auto wd = params.w_ssm.data();
        auto dbias = params.delta_bias.data();
        const std::size_t cols = d + 2 * n;
        for (std::size_t j = 0; j < cols; ++j) {
            T acc = T(0);
            for (std::size_t kk = 0; kk < d; ++kk) acc += u[kk] * wd[kk * cols + j];
            if (j < d) {
                T v = acc + dbias[j];
                T m = v > T(0) ? v : T(0);
                delta[j] = m + std::log1p(std::exp(-std::abs(v)));
            } else if (j < d + n) {
                bvec[j - d] = acc;
            } else {
                cvec[j - d - n] = acc;
            }
        }
    }

    // recurrence + readout + gated output projection
    std::vector<T> gated(d);
    {
        auto ad = params.a_log.data();
        auto skip = params.skip.data();
        auto h = state.h.data();
        for (std::size_t c = 0; c < d; ++c) {
            T* hc = h.data() + c * n;
            const T inp = delta[c] * u[c];
            T read = T(0);
            for (std::size_t s = 0; s < n; ++s) {
                hc[s] = std::exp(-delta[c] * std::exp(ad[c * n + s])) * hc[s] + inp * bvec[s];
                read += cvec[s] * hc[s];
            }
            T r = read + skip[c] * u[c];
            T g = gate[c];
            T sg = g >= T(0) ? T(1) / (T(1) + std::exp(-g)) : std::exp(g) / (T(1) + std::exp(g));
            gated[c] = g * sg * r;
        }
    }
    {
        auto wd = params.w_out.data();
        for (std::size_t j = 0; j < d; ++j) {
            T acc = T(0);
            for (std::size_t kk = 0; kk < d; ++kk) acc += gated[kk] * wd[kk * d + j];
            y_t[j] = x_t[j] + acc;
        }
    }
}

template <class T>
Tensor<T> encoder_forward(Tape<T>* tape, const Tensor<T>& x, const std::vector<SsmBlockParams<T>>& blocks,
                          T eps) {
    if (blocks.empty()) throw ConfigError("encoder_forward: at least one block is required");
    Tensor<T> h = x;
    for (const auto& b : blocks) h = block_forward_scan(tape, h, b, eps);
    return h;
}

#define HMR_INSTANTIATE_SSM(T)                                                                             \
    template struct SsmBlockParams<T>;                                                                     \
    template Tensor<T> block_forward_scan<T>(Tape<T>*, const Tensor<T>&, const SsmBlockParams<T>&, T);     \
    template void block_step<T>(std::span<const T>, BlockState<T>&, const SsmBlockParams<T>&, T,           \
                                std::span<T>);                                                             \
    template Tensor<T> encoder_forward<T>(Tape<T>*, const Tensor<T>&,                                      \
                                          const std::vector<SsmBlockParams<T>>&, T);

HMR_INSTANTIATE_SSM(float)
HMR_INSTANTIATE_SSM(double)

}  // namespace hmr
