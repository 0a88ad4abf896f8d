#pragma once

#include "hmr/ops.hpp"
#include "hmr/tensor.hpp"

namespace hmr {

// Holographic reduced representation operations: binding by circular
// convolution, unbinding by circular correlation, and window-level
// bundling of role-tagged tokens.

// Exact O(d^2) evaluation of (x (*) y)_j = sum_k x_k y_{(j-k) mod d}.
// Serves as the correctness oracle for the frequency-domain path.
template <class T>
Tensor<T> circ_conv_naive(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& y);

// Frequency-domain circular convolution; any length (Bluestein for
// non-powers of two). Equal to the naive form within 1e-10 at 64 bit.
template <class T>
Tensor<T> circ_conv_fft(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& y);

// Circular correlation corr(x,y)_k = sum_j x_j y_{(j-k) mod d}; the
// approximate inverse of binding for unit-scaled role vectors.
template <class T>
Tensor<T> circ_corr(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& y);

// Row-wise circular convolution of two [..., d] tensors (FFT path).
template <class T>
Tensor<T> circ_conv_rows(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& y);

// LayerNorm(item + alpha * (item (*) attr)) applied position-wise.
// Output shape equals item_emb shape; differentiable in everything
// including the binding strength alpha.
template <class T>
Tensor<T> bind_embed(Tape<T>* tape, const Tensor<T>& item_emb, const Tensor<T>& attr_emb,
                     const Tensor<T>& alpha, const Tensor<T>& gain, const Tensor<T>& bias, T eps);

// Superimposes each run of k consecutive tokens into one vector,
// role-tagging position m within the window by circular convolution
// with roles[m], then LayerNorms the sum:
//   window_j = LayerNorm( sum_m roles[m] (*) tokens[j*k + m] )
// A final partial window sums only its available tokens. Input [L,d] or
// [B,L,d]; output length is exactly ceil(L/k).
template <class T>
Tensor<T> bundle_window(Tape<T>* tape, const Tensor<T>& tokens, const Tensor<T>& roles, std::size_t k,
                        const Tensor<T>& gain, const Tensor<T>& bias, T eps);

std::size_t bundle_length(std::size_t len, std::size_t k);

// Index of the codebook row (rows of a [V,d] tensor) with the highest
// cosine similarity to v; the cleanup step of HRR retrieval.
template <class T>
std::size_t nearest_cosine(std::span<const T> v, const Tensor<T>& codebook);

}  // namespace hmr
