#pragma once

#include "hmr/ops.hpp"
#include "hmr/rng.hpp"
#include "hmr/tensor.hpp"

namespace hmr {

// One selective state-space block. Activations are row vectors and
// weights right-multiply, so w_in is [d, 2d], w_ssm is [d, d+2n] and the
// per-step readout path is y = x + (SiLU(g) .* r) * w_out.
template <class T>
struct SsmBlockParams {
    Tensor<T> w_in;          // [d, 2d] -> (conv input, gate)
    Tensor<T> conv_kernels;  // [w, d], kernels[w-1] = current step
    Tensor<T> conv_bias;     // [d]
    Tensor<T> w_ssm;         // [d, d + 2n] -> (delta preact, B, C)
    Tensor<T> delta_bias;    // [d]
    Tensor<T> a_log;         // [d, n]; A = exp(a_log) > 0
    Tensor<T> skip;          // [d], direct input-to-readout path
    Tensor<T> w_out;         // [d, d]
    Tensor<T> norm_gain;     // [d]
    Tensor<T> norm_bias;     // [d]

    std::size_t dim() const { return w_in.dim(0); }
    std::size_t state_dim() const { return a_log.dim(1); }
    std::size_t conv_width() const { return conv_kernels.dim(0); }

    static SsmBlockParams init(std::size_t d, std::size_t n, std::size_t conv_w, Rng& rng);
    void set_requires_grad(bool on);
};

// Recurrent working set of one block: the latent state plus the causal
// convolution ring. Owned by exactly one in-flight sequence.
template <class T>
struct BlockState {
    Tensor<T> h;     // [d, n]
    Tensor<T> ring;  // [w-1, d], oldest row first
    std::size_t bytes() const { return (h.size() + ring.size()) * sizeof(T); }

    static BlockState zeros(std::size_t d, std::size_t n, std::size_t conv_w) {
        return {Tensor<T>::zeros({d, n}), Tensor<T>::zeros({conv_w > 0 ? conv_w - 1 : 0, d})};
    }
};

// Full-sequence evaluation of one block (pre-norm residual included).
// X is [L,d] or [B,L,d]; output has the same shape.
template <class T>
Tensor<T> block_forward_scan(Tape<T>* tape, const Tensor<T>& x, const SsmBlockParams<T>& params, T eps);

// Single-timestep evaluation with identical arithmetic to one column of
// the scan; memory use is independent of how many steps were taken.
// x_t and y_t are rows of length d.
template <class T>
void block_step(std::span<const T> x_t, BlockState<T>& state, const SsmBlockParams<T>& params, T eps,
                std::span<T> y_t);

// Sequential composition of blocks.
template <class T>
Tensor<T> encoder_forward(Tape<T>* tape, const Tensor<T>& x, const std::vector<SsmBlockParams<T>>& blocks,
                          T eps);

}  // namespace hmr
