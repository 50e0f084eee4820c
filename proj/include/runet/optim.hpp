#pragma once

#include "runet/layers.hpp"

namespace runet {

// Global L2 norm over the gradients of all trainable parameters. Parameters
// that never received gradient contribute zero.
template <typename T>
T grad_norm(const ParamStore<T>& ps) {
    double sq = 0;
    for (const auto& e : ps.entries) {
        if (!e.trainable || !e.var->has_grad()) continue;
        for (T g : e.var->grad.data) sq += double(g) * double(g);
    }
    return static_cast<T>(std::sqrt(sq));
}

// Scales all gradients by threshold/norm when the global norm exceeds the
// threshold; returns the applied scale (1 when no clipping happened).
template <typename T>
T clip_gradients(ParamStore<T>& ps, T threshold = T(10)) {
    T norm = grad_norm(ps);
    if (!(norm > threshold)) return T(1);
    T scale = threshold / norm;
    for (auto& e : ps.entries) {
        if (!e.trainable || !e.var->has_grad()) continue;
        for (T& g : e.var->grad.data) g *= scale;
    }
    return scale;
}

// SGD with classical momentum: v <- mu*v + g; p <- p - lr*v.
// Velocity buffers parallel the trainable entries by index.
template <typename T>
struct SgdMomentum {
    T lr;
    T momentum;
    std::vector<Tensor<T>> velocity;  // one per store entry; empty for buffers

    SgdMomentum(const ParamStore<T>& ps, T lr_, T momentum_ = T(0.9))
        : lr(lr_), momentum(momentum_) {
        velocity.reserve(ps.entries.size());
        for (const auto& e : ps.entries)
            velocity.push_back(e.trainable ? Tensor<T>(e.var->value.shape) : Tensor<T>());
    }

    void step(ParamStore<T>& ps) {
        if (velocity.size() != ps.entries.size())
            throw ContractError("optimizer bound to a different parameter store");
        for (size_t i = 0; i < ps.entries.size(); ++i) {
            auto& e = ps.entries[i];
            if (!e.trainable) continue;
            if (!e.var->has_grad())
                throw ContractError(cat("sgd step: no gradient for ", e.name));
            Tensor<T>& v = velocity[i];
            Tensor<T>& p = e.var->value;
            const Tensor<T>& g = e.var->grad;
            for (int64_t j = 0; j < p.size(); ++j) {
                v[j] = momentum * v[j] + g[j];
                p[j] -= lr * v[j];
            }
        }
    }
};

}  // namespace runet
