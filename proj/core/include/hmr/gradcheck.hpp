#pragma once

#include <functional>

#include "hmr/tensor.hpp"

namespace hmr {

// Scalar-valued function of one tensor, built on the given tape.
template <class T>
using TensorFn = std::function<Tensor<T>(Tape<T>&, const Tensor<T>&)>;

// Compares the reverse-mode gradient of f at `point` against central
// finite differences with per-coordinate step h * max(1, |x_i|).
// Returns the worst relative error, with denominator
// max(|analytic|, |numeric|, 1e-8). Use the 64-bit instantiation; float
// differences drown in roundoff.
template <class T>
double grad_check(const TensorFn<T>& f, const Tensor<T>& point, double h);

// Same check for a function of several parameter tensors (e.g. a whole
// model loss): `make_loss` evaluates the loss from the current contents
// of `params`, which are nudged in place.
template <class T>
double grad_check_params(const std::function<Tensor<T>(Tape<T>&)>& make_loss,
                         const std::vector<Tensor<T>*>& params, double h);

}  // namespace hmr
