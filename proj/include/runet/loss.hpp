#pragma once

#include "runet/nn_ops.hpp"

namespace runet {

// Per-step supervision weights w_t = alpha^(N-t) for t = 1..N: geometric decay
// toward earlier steps, always ending at exactly 1 for the final step.
template <typename T>
std::vector<T> step_weights(int n, T alpha) {
    if (n < 1) throw InvalidConfigError(cat("step_weights: N must be >= 1, got ", n));
    if (!(alpha > T(0)) || alpha > T(1))
        throw InvalidConfigError(cat("step_weights: alpha must lie in (0,1], got ", alpha));
    std::vector<T> w(static_cast<size_t>(n));
    for (int t = 1; t <= n; ++t) w[static_cast<size_t>(t - 1)] = std::pow(alpha, T(n - t));
    return w;
}

template <typename T>
struct LossReport {
    T total = 0;
    std::vector<T> per_step;
    std::vector<T> weights;
};

// L = sum_t w_t * L_t with L_t the mean pixelwise cross-entropy of step t.
// The graph spans every step, so backward reaches each iteration's parameters
// through both its own supervision and the feedback path into later steps.
template <typename T>
Var<T> multi_step_loss(const std::vector<Var<T>>& logits_seq, const Tensor<T>& target, T alpha,
                       LossReport<T>* report = nullptr) {
    if (logits_seq.empty()) throw InvalidConfigError("multi_step_loss: empty logits sequence");
    std::vector<T> w = step_weights(static_cast<int>(logits_seq.size()), alpha);
    Var<T> total;
    if (report) {
        report->per_step.clear();
        report->weights = w;
    }
    for (size_t t = 0; t < logits_seq.size(); ++t) {
        Var<T> lt = softmax_ce_loss(logits_seq[t], target);
        if (report) report->per_step.push_back(lt->value[0]);
        Var<T> weighted = affine(lt, w[t]);
        total = total ? add(total, weighted) : weighted;
    }
    if (report) report->total = total->value[0];
    return total;
}

}  // namespace runet
