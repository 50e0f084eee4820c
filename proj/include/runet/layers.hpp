#pragma once

#include <optional>
#include <unordered_map>

#include "runet/nn_ops.hpp"

namespace runet {

// Role drives initialization (fan-in location differs between conv layouts)
// and the family grouping used by gradient-check reporting.
enum class ParamRole { conv_weight, convt_weight, bias, gain, shift, buffer_mean, buffer_var };

inline const char* family_of(ParamRole role) {
    switch (role) {
        case ParamRole::conv_weight:
        case ParamRole::convt_weight: return "weight";
        case ParamRole::bias: return "bias";
        case ParamRole::gain: return "gamma";
        case ParamRole::shift: return "beta";
        default: return "buffer";
    }
}

// Registry of named parameters and buffers. Registration order is the
// serialization order; names are unique.
template <typename T>
struct ParamStore {
    struct Entry {
        std::string name;
        Var<T> var;
        ParamRole role;
        bool trainable;
    };
    std::vector<Entry> entries;
    std::unordered_map<std::string, size_t> index;

    Var<T> add(const std::string& name, Tensor<T> init, ParamRole role, bool trainable = true) {
        if (index.count(name)) throw ContractError(cat("duplicate parameter name: ", name));
        Var<T> v = leaf(std::move(init), trainable);
        index[name] = entries.size();
        entries.push_back({name, v, role, trainable});
        return v;
    }

    const Entry* find(const std::string& name) const {
        auto it = index.find(name);
        return it == index.end() ? nullptr : &entries[it->second];
    }

    int64_t trainable_count(const std::string& prefix = "") const {
        int64_t n = 0;
        for (const auto& e : entries)
            if (e.trainable && e.name.rfind(prefix, 0) == 0) n += e.var->value.size();
        return n;
    }

    void zero_grads() {
        for (auto& e : entries) e.var->zero_grad();
    }
};

// He (fan-in) initialization: conv weights ~ N(0, sqrt(2/fan_in)), biases and
// shifts 0, gains 1, running stats reset. Streams are keyed by parameter name
// so the draw for one layer is independent of registration order elsewhere.
template <typename T>
void he_init(ParamStore<T>& ps, uint64_t seed) {
    for (auto& e : ps.entries) {
        Tensor<T>& t = e.var->value;
        switch (e.role) {
            case ParamRole::conv_weight:
            case ParamRole::convt_weight: {
                int64_t fan_in;
                if (e.role == ParamRole::conv_weight)
                    fan_in = static_cast<int64_t>(t.dim(1)) * t.dim(2) * t.dim(3);
                else
                    fan_in = static_cast<int64_t>(t.dim(0)) * t.dim(2) * t.dim(3);
                auto rng = make_rng(seed, std::hash<std::string>{}(e.name));
                std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / double(fan_in)));
                for (auto& v : t.data) v = static_cast<T>(dist(rng));
                break;
            }
            case ParamRole::bias:
            case ParamRole::shift:
            case ParamRole::buffer_mean: t.fill(T(0)); break;
            case ParamRole::gain:
            case ParamRole::buffer_var: t.fill(T(1)); break;
        }
        e.var->zero_grad();
    }
}

template <typename T>
struct Conv2dLayer {
    Var<T> weight, bias;
    int stride = 1, pad = 0;

    Conv2dLayer() = default;
    Conv2dLayer(ParamStore<T>& ps, const std::string& prefix, int in_ch, int out_ch, int k,
                int stride_, int pad_)
        : weight(ps.add(prefix + ".weight", Tensor<T>({out_ch, in_ch, k, k}),
                        ParamRole::conv_weight)),
          bias(ps.add(prefix + ".bias", Tensor<T>({out_ch}), ParamRole::bias)),
          stride(stride_),
          pad(pad_) {}

    Var<T> operator()(const Var<T>& x) const { return conv2d(x, weight, bias, stride, pad); }
};

template <typename T>
struct ConvTranspose2dLayer {
    Var<T> weight, bias;
    int stride = 2;

    ConvTranspose2dLayer() = default;
    ConvTranspose2dLayer(ParamStore<T>& ps, const std::string& prefix, int in_ch, int out_ch,
                         int k = 2, int stride_ = 2)
        : weight(ps.add(prefix + ".weight", Tensor<T>({in_ch, out_ch, k, k}),
                        ParamRole::convt_weight)),
          bias(ps.add(prefix + ".bias", Tensor<T>({out_ch}), ParamRole::bias)),
          stride(stride_) {}

    Var<T> operator()(const Var<T>& x) const { return conv_transpose2d(x, weight, bias, stride); }
};

enum class NormKind { group, batch };

// Norm layer with the group/batch choice made at construction. Group count is
// min(4, channels): 4 divides every width in the 8-base schedule, and smaller
// widths fall back to fewer groups.
template <typename T>
struct Norm2dLayer {
    NormKind kind = NormKind::group;
    int groups = 1;
    Var<T> gamma, beta, running_mean, running_var;

    Norm2dLayer() = default;
    Norm2dLayer(ParamStore<T>& ps, const std::string& prefix, int channels, NormKind kind_)
        : kind(kind_), groups(std::min(4, channels)) {
        gamma = ps.add(prefix + ".gamma", Tensor<T>({channels}, T(1)), ParamRole::gain);
        beta = ps.add(prefix + ".beta", Tensor<T>({channels}, T(0)), ParamRole::shift);
        if (kind == NormKind::batch) {
            running_mean = ps.add(prefix + ".running_mean", Tensor<T>({channels}, T(0)),
                                  ParamRole::buffer_mean, false);
            running_var = ps.add(prefix + ".running_var", Tensor<T>({channels}, T(1)),
                                 ParamRole::buffer_var, false);
        }
    }

    Var<T> operator()(const Var<T>& x, bool training) const {
        if (kind == NormKind::group) return group_norm(x, gamma, beta, groups);
        return batch_norm2d(x, gamma, beta, running_mean, running_var, training);
    }
};

// Two conv3x3+norm+relu layers, the standard U-Net block.
template <typename T>
struct ConvBlock {
    Conv2dLayer<T> conv1, conv2;
    Norm2dLayer<T> norm1, norm2;

    ConvBlock() = default;
    ConvBlock(ParamStore<T>& ps, const std::string& prefix, int in_ch, int out_ch, NormKind norm)
        : conv1(ps, prefix + ".conv1", in_ch, out_ch, 3, 1, 1),
          conv2(ps, prefix + ".conv2", out_ch, out_ch, 3, 1, 1),
          norm1(ps, prefix + ".norm1", out_ch, norm),
          norm2(ps, prefix + ".norm2", out_ch, norm) {}

    Var<T> operator()(const Var<T>& x, bool training) const {
        Var<T> h = relu(norm1(conv1(x), training));
        return relu(norm2(conv2(h), training));
    }
};

// Test-only gate instrumentation. A pre-activation bias shifts the logit fed
// to sigma (so +-20 saturates the gate); an override replaces the gate tensor
// with a constant fill, making identities like h_t == h_{t-1} exact.
template <typename T>
struct GateHooks {
    std::optional<T> z_preact_bias, r_preact_bias;
    std::optional<T> z_override, r_override;
    bool record_gates = false;
};

template <typename T>
Var<T> gate_sigmoid(Var<T> preact, const std::optional<T>& bias, const std::optional<T>& override_fill) {
    if (override_fill) return constant(Tensor<T>(preact->value.shape, *override_fill));
    if (bias) preact = affine(preact, T(1), *bias);
    return sigmoid(preact);
}

// Conventional convolutional GRU cell: single 3x3 conv per gate over the
// concatenated (input, hidden) tensor. Used by the rec-mid and rec-last
// baselines; the hidden width is fixed at construction.
template <typename T>
struct ConvGRUCell {
    Conv2dLayer<T> conv_z, conv_r, conv_h;
    int hidden_ch = 0;
    GateHooks<T> hooks;
    mutable std::optional<Tensor<T>> last_z, last_r;

    ConvGRUCell() = default;
    ConvGRUCell(ParamStore<T>& ps, const std::string& prefix, int in_ch, int hidden)
        : conv_z(ps, prefix + ".z", in_ch + hidden, hidden, 3, 1, 1),
          conv_r(ps, prefix + ".r", in_ch + hidden, hidden, 3, 1, 1),
          conv_h(ps, prefix + ".h", in_ch + hidden, hidden, 3, 1, 1),
          hidden_ch(hidden) {}

    Var<T> step(const Var<T>& x, const Var<T>& h_prev) const {
        Var<T> xh = concat_channels(x, h_prev);
        Var<T> z = gate_sigmoid(conv_z(xh), hooks.z_preact_bias, hooks.z_override);
        Var<T> r = gate_sigmoid(conv_r(xh), hooks.r_preact_bias, hooks.r_override);
        if (hooks.record_gates) {
            last_z = z->value;
            last_r = r->value;
        }
        Var<T> hhat = tanh(conv_h(concat_channels(x, mul(r, h_prev))));
        return add(mul(z, h_prev), mul(one_minus(z), hhat));
    }
};

}  // namespace runet
