#pragma once

#include <map>

#include "runet/finite_diff.hpp"
#include "runet/loss.hpp"
#include "runet/recurrent.hpp"

namespace runet {

struct GradCheckConfig {
    uint64_t seed = 17;
    int batch = 1;
    int height = 16, width = 16;
    int min_per_family = 200;  // sampled elements per {weight, bias, gamma, beta} family
    double eps = 1e-3;
    double tol = 1e-4;
    // Scale-agreement bound for accepting a sample; see gradcheck_model.
    double kink_tol = 1e-5;
};

struct FamilyStat {
    std::string family;
    int64_t checked = 0;
    int64_t skipped = 0;  // samples where the numeric oracle invalidated itself
    double max_rel_err = 0;
    std::string worst_param;
    int64_t worst_index = -1;
    double worst_analytic = 0, worst_numeric = 0;
};

struct GradCheckResult {
    std::vector<FamilyStat> families;
    double max_rel_err = 0;
    int64_t checked = 0, skipped = 0;
    bool passed(double tol) const { return max_rel_err < tol; }
    // Guard against the kink filter silently discarding everything.
    double kept_fraction() const {
        int64_t total = checked + skipped;
        return total == 0 ? 0.0 : double(checked) / double(total);
    }
};

namespace detail {

// Evenly spaced sample of k element indices out of n (all of them when n <= k).
inline std::vector<int64_t> spaced_sample(int64_t n, int64_t k) {
    std::vector<int64_t> idx;
    if (n <= k) {
        idx.resize(size_t(n));
        for (int64_t i = 0; i < n; ++i) idx[size_t(i)] = i;
        return idx;
    }
    idx.reserve(size_t(k));
    for (int64_t i = 0; i < k; ++i) idx.push_back(i * n / k);
    return idx;
}

}  // namespace detail

// Model-level finite-difference check in double precision: compares the
// backprop gradient of the full multi-step loss against central differences
// on a sampled subset of each parameter family.
//
// The network is only piecewise smooth (relu, max-pool argmax), so a raw
// central difference is an invalid oracle whenever the +-eps perturbation
// crosses a kink somewhere downstream of the sampled parameter: the estimate
// then carries O(eps) noise that has nothing to do with backward correctness.
// Each sample therefore runs at eps, eps/2 and eps/4. Disagreement between the
// two coarser differences beyond kink_tol marks a crossing and skips the
// sample. Otherwise two Richardson combinations (4*d_fine - d_coarse)/3 cancel
// the cubic truncation term; batch norm over near-constant activations (e.g.
// the all-ones initial hidden state) leaves spikes in the fifth derivative
// that survive a single Richardson pass, so the two combinations must also
// agree within kink_tol — if they do, the finer one is compared against the
// analytic gradient. The filter reads only the numeric side, so a wrong
// backward pass cannot hide behind it — every kept sample still flags the
// mismatch, and kept_fraction() exposes over-filtering.
inline GradCheckResult gradcheck_model(Model<double>& model, const GradCheckConfig& cfg = {}) {
    auto rng = make_rng(cfg.seed);
    std::uniform_real_distribution<double> unif(0.0, 1.0);

    Tensor<double> image({cfg.batch, model.spec.in_channels, cfg.height, cfg.width});
    for (int64_t i = 0; i < image.size(); ++i) image[i] = unif(rng);
    Tensor<double> target({cfg.batch, 1, cfg.height, cfg.width});
    for (int64_t i = 0; i < target.size(); ++i) target[i] = unif(rng) < 0.35 ? 1.0 : 0.0;

    // Batch-norm running buffers mutate during a training forward; snapshot and
    // restore around every evaluation so each call sees identical state.
    std::vector<Tensor<double>> buffers;
    for (auto& e : model.store.entries)
        if (!e.trainable) buffers.push_back(e.var->value);
    auto restore_buffers = [&]() {
        size_t k = 0;
        for (auto& e : model.store.entries)
            if (!e.trainable) e.var->value = buffers[k++];
    };

    auto loss_value = [&]() {
        NoGradGuard guard;  // value-only evaluation, no tape
        restore_buffers();
        auto logits = model.forward(image, /*training=*/true);
        double v = multi_step_loss(logits, target, model.spec.alpha)->value[0];
        restore_buffers();
        return v;
    };

    // One backward pass gives every analytic gradient at once.
    model.store.zero_grads();
    restore_buffers();
    {
        auto logits = model.forward(image, /*training=*/true);
        backward(multi_step_loss(logits, target, model.spec.alpha));
    }
    restore_buffers();

    // Copy analytic grads aside: finite differencing must not depend on them
    // staying untouched inside the store.
    std::map<std::string, Tensor<double>> analytic;
    for (auto& e : model.store.entries) {
        if (!e.trainable) continue;
        e.var->ensure_grad();
        analytic.emplace(e.name, e.var->grad);
    }

    // Group parameters by family and split the per-family budget
    // proportionally to parameter count.
    std::map<std::string, std::vector<typename ParamStore<double>::Entry*>> by_family;
    for (auto& e : model.store.entries)
        if (e.trainable) by_family[family_of(e.role)].push_back(&e);

    GradCheckResult result;
    for (auto& [family, entries] : by_family) {
        FamilyStat stat;
        stat.family = family;
        int64_t total = 0;
        for (auto* e : entries) total += e->var->value.size();
        for (auto* e : entries) {
            int64_t share = std::max<int64_t>(
                1, cfg.min_per_family * e->var->value.size() / std::max<int64_t>(1, total));
            for (int64_t slot : detail::spaced_sample(e->var->value.size(), share)) {
                double& param = e->var->value.data[size_t(slot)];
                double d_full = central_diff(loss_value, param, cfg.eps);
                double d_half = central_diff(loss_value, param, cfg.eps / 2);
                double d_quarter = central_diff(loss_value, param, cfg.eps / 4);
                double scale = std::max({1.0, std::abs(d_full), std::abs(d_half)});
                double r_coarse = (4.0 * d_half - d_full) / 3.0;
                double r_fine = (4.0 * d_quarter - d_half) / 3.0;
                if (std::abs(d_full - d_half) > cfg.kink_tol * scale ||
                    std::abs(r_coarse - r_fine) > cfg.kink_tol * scale) {
                    ++stat.skipped;
                    continue;
                }
                double numeric = r_fine;
                double a = analytic.at(e->name)[slot];
                double err = rel_err(a, numeric, 1.0);
                ++stat.checked;
                if (err > stat.max_rel_err) {
                    stat.max_rel_err = err;
                    stat.worst_param = e->name;
                    stat.worst_index = slot;
                    stat.worst_analytic = a;
                    stat.worst_numeric = numeric;
                }
            }
        }
        result.max_rel_err = std::max(result.max_rel_err, stat.max_rel_err);
        result.checked += stat.checked;
        result.skipped += stat.skipped;
        result.families.push_back(std::move(stat));
    }
    return result;
}

}  // namespace runet
