#pragma once

#include "runet/tensor.hpp"

namespace runet {

// Central difference of a scalar function wrt one mutable slot. f() must
// recompute the forward pass from current parameter values on every call.
template <typename T, typename F>
T central_diff(F&& f, T& slot, T eps) {
    const T saved = slot;
    slot = saved + eps;
    const T fp = f();
    slot = saved - eps;
    const T fm = f();
    slot = saved;
    return (fp - fm) / (2 * eps);
}

// Dense finite-difference gradient wrt every element of param. Quadratic cost;
// meant for small test tensors only.
template <typename T, typename F>
Tensor<T> finite_diff_grad(F&& f, Tensor<T>& param, T eps) {
    Tensor<T> g(param.shape);
    for (int64_t i = 0; i < param.size(); ++i) g[i] = central_diff(f, param[i], eps);
    return g;
}

template <typename T>
T rel_err(T a, T n, T floor_den) {
    T den = std::max({std::abs(a), std::abs(n), floor_den});
    return std::abs(a - n) / den;
}

}  // namespace runet
