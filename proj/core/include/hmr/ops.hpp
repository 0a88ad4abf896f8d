#pragma once

#include "hmr/rng.hpp"
#include "hmr/tensor.hpp"

namespace hmr {

// Differentiable tensor operations. Every function takes the recording
// tape as its first argument; pass nullptr for inference (no node is
// recorded and outputs do not require grad). Supported broadcasts are
// scalar-with-tensor (either side) and a rank-1 vector against the last
// axis of the other operand; anything else is a ShapeError.

template <class T>
Tensor<T> gaussian(Rng& rng, Shape shape, double stddev);

template <class T>
Tensor<T> add(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> sub(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> mul(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> neg(Tape<T>* tape, const Tensor<T>& a);

template <class T>
Tensor<T> exp(Tape<T>* tape, const Tensor<T>& a);
template <class T>
Tensor<T> sigmoid(Tape<T>* tape, const Tensor<T>& a);
template <class T>
Tensor<T> softplus(Tape<T>* tape, const Tensor<T>& a);
template <class T>
Tensor<T> silu(Tape<T>* tape, const Tensor<T>& a);

template <class T>
Tensor<T> sum(Tape<T>* tape, const Tensor<T>& a);
template <class T>
Tensor<T> mean(Tape<T>* tape, const Tensor<T>& a);

// 2-D matrix product a[m,k] * b[k,n].
template <class T>
Tensor<T> matmul(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b);
// a[m,k] * b[n,k]^T -> [m,n]; used for classification heads.
template <class T>
Tensor<T> matmul_nt(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b);

template <class T>
Tensor<T> concat_last(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b);
template <class T>
std::vector<Tensor<T>> split_last(Tape<T>* tape, const Tensor<T>& x, const std::vector<std::size_t>& sizes);

// Standardizes over the last axis, then applies gain/bias.
template <class T>
Tensor<T> layer_norm(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps);

// Gathers rows of table[V,d]; output shape = indices.shape + [d].
// Backward scatter-adds into the table gradient (including row 0).
template <class T>
Tensor<T> embedding_lookup(Tape<T>* tape, const Tensor<T>& table, const IntTensor& indices);

// Per-channel causal convolution over time. x is [L,d] or [B,L,d],
// kernels [w,d] with kernels[w-1] weighting the current step, bias [d].
template <class T>
Tensor<T> causal_depthwise_conv1d(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& kernels,
                                  const Tensor<T>& bias);

// Input-conditioned linear recurrence over time:
//   h_t[c,s] = exp(-delta_t[c] * A[c,s]) * h_{t-1}[c,s] + delta_t[c] * B_t[s] * u_t[c]
//   r_t[c]   = sum_s C_t[s] * h_t[c,s] + D[c] * u_t[c]
// u,delta are [L,d] or [B,L,d]; Bm,Cm are [L,n] or [B,L,n]; A is [d,n]
// (positive), D is [d]. h starts at zero for every sequence.
template <class T>
Tensor<T> selective_scan(Tape<T>* tape, const Tensor<T>& u, const Tensor<T>& delta, const Tensor<T>& Bm,
                         const Tensor<T>& Cm, const Tensor<T>& A, const Tensor<T>& D);

// Mean over rows with target != 0 of -log softmax(logits)[target].
// logits [N,V] or [B,L,V] with N = B*L targets. Throws ContractError if
// every target is padding.
template <class T>
Tensor<T> masked_cross_entropy(Tape<T>* tape, const Tensor<T>& logits, const IntTensor& targets);

// Inverted dropout; identity when p == 0 or training is false.
template <class T>
Tensor<T> dropout(Tape<T>* tape, const Tensor<T>& x, double p, Rng& rng, bool training);

}  // namespace hmr
