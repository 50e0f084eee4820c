#pragma once

#include "runet/unet.hpp"

namespace runet {

enum class Variant { unet_b, unet_g, rec_last, rec_mid, rec_simple, runet_sru, runet_dru };

inline const char* variant_name(Variant v) {
    switch (v) {
        case Variant::unet_b: return "unet-b";
        case Variant::unet_g: return "unet-g";
        case Variant::rec_last: return "rec-last";
        case Variant::rec_mid: return "rec-mid";
        case Variant::rec_simple: return "rec-simple";
        case Variant::runet_sru: return "runet-sru";
        case Variant::runet_dru: return "runet-dru";
    }
    return "?";
}

inline Variant parse_variant(const std::string& s) {
    for (Variant v : {Variant::unet_b, Variant::unet_g, Variant::rec_last, Variant::rec_mid,
                      Variant::rec_simple, Variant::runet_sru, Variant::runet_dru})
        if (s == variant_name(v)) return v;
    throw InvalidConfigError(cat("unknown model variant: ", s));
}

// Complete model recipe: which variant, where the recurrence sits, how many
// refinement steps, and the backbone dimensions. steps/alpha/s0/h0 default to
// the operating point that refines well across tasks: 3 steps, alpha 0.4,
// all-ones initial states.
struct ModelSpec {
    Variant variant = Variant::unet_g;
    int level = 0;  // gate-unit level, runet variants only
    int steps = 3;
    double s0_init = 1.0;
    double h0_init = 1.0;
    double alpha = 0.4;
    int in_channels = 3;  // image channels; the feedback mask channel is added internally
    int base_channels = 8;
    int depth = 4;

    bool gated() const { return variant == Variant::runet_sru || variant == Variant::runet_dru; }
    bool recurrent() const { return variant != Variant::unet_b && variant != Variant::unet_g; }
    bool mask_feedback() const { return gated() || variant == Variant::rec_simple; }
    NormKind norm() const { return variant == Variant::unet_b ? NormKind::batch : NormKind::group; }
    int effective_steps() const { return recurrent() ? steps : 1; }

    void validate() const {
        if (in_channels < 1 || base_channels < 1 || depth < 1)
            throw InvalidConfigError("model: channels and depth must be positive");
        if (steps < 1) throw InvalidConfigError(cat("model: steps must be >= 1, got ", steps));
        if (!(alpha > 0.0 && alpha <= 1.0))
            throw InvalidConfigError(cat("model: alpha must lie in (0,1], got ", alpha));
        if (gated() && (level < 0 || level > depth))
            throw InvalidConfigError(cat("model: level ", level, " outside 0..", depth));
    }
};

// The gated recurrent unit that replaces U-Net levels l..depth. f_z and f_h
// are encoder-decoder subnetworks mirroring the replaced portion (input =
// channels of e^l, first width = base*2^l, depth-l pooling levels, own skips);
// f_r shares that architecture plus a 1x1 projection back to e^l's channel
// count so the reset tensor can mask the input elementwise. f_s is a single
// conv3x3+norm+relu block at the hidden width. The hidden state h lives in the
// subnet output space: base*2^l channels at 1/2^l resolution.
template <typename T>
struct RecurrentUnit {
    bool dual = false;
    int e_channels = 0, hidden_channels = 0;
    EncoderDecoder<T> fz, fh;
    std::optional<EncoderDecoder<T>> fr;
    Conv2dLayer<T> fr_proj;
    Conv2dLayer<T> fs_conv;
    Norm2dLayer<T> fs_norm;
    GateHooks<T> hooks;
    mutable std::optional<Tensor<T>> last_z, last_r;

    RecurrentUnit() = default;
    RecurrentUnit(ParamStore<T>& ps, const std::string& prefix, int e_ch, int sub_base,
                  int sub_depth, NormKind norm, bool dual_)
        : dual(dual_),
          e_channels(e_ch),
          hidden_channels(sub_base),
          fz(ps, prefix + ".fz.", e_ch, sub_base, sub_depth, norm),
          fh(ps, prefix + ".fh.", e_ch, sub_base, sub_depth, norm),
          fs_conv(ps, prefix + ".fs.conv", sub_base, sub_base, 3, 1, 1),
          fs_norm(ps, prefix + ".fs.norm", sub_base, norm) {
        if (dual) {
            fr.emplace(ps, prefix + ".fr.", e_ch, sub_base, sub_depth, norm);
            fr_proj = Conv2dLayer<T>(ps, prefix + ".fr.proj", sub_base, e_ch, 1, 1, 0);
        }
    }

    struct StepOut {
        Var<T> d, h;
    };

    // One recurrence step: z and (for DRU) r are computed from e alone; h_prev
    // enters only the convex combination, never the subnets.
    StepOut step(const Var<T>& e, const Var<T>& h_prev, bool training) const {
        if (e->value.dim(1) != e_channels)
            throw InvalidShapeError(cat("recurrent unit: e has ", e->value.dim(1),
                                        " channels, expected ", e_channels));
        Var<T> z = gate_sigmoid(fz(e, training), hooks.z_preact_bias, hooks.z_override);
        Var<T> cand_in = e;
        if (dual) {
            Var<T> r = gate_sigmoid(fr_proj((*fr)(e, training)), hooks.r_preact_bias,
                                    hooks.r_override);
            if (hooks.record_gates) last_r = r->value;
            cand_in = mul(r, e);
        }
        if (hooks.record_gates) last_z = z->value;
        Var<T> hhat = tanh(fh(cand_in, training));
        if (!hhat->value.same_shape(h_prev->value))
            throw InvalidShapeError(cat("recurrent unit: h_prev shape ",
                                        shape_str(h_prev->value.shape), " vs candidate ",
                                        shape_str(hhat->value.shape)));
        Var<T> h = add(mul(z, h_prev), mul(one_minus(z), hhat));
        Var<T> d = relu(fs_norm(fs_conv(h), training));
        return {d, h};
    }
};

// A built model: the parameter store plus whichever submodules the variant
// uses. forward() returns one logits tensor per refinement step (a single
// entry for the one-shot U-Nets).
template <typename T>
struct Model {
    ModelSpec spec;
    ParamStore<T> store;
    std::optional<EncoderDecoder<T>> core;  // unet-b/g, rec-simple, rec-last
    std::optional<UNetTrunk<T>> trunk;      // outer shell: runet variants, rec-mid
    std::optional<RecurrentUnit<T>> unit;   // runet-sru / runet-dru
    std::optional<ConvGRUCell<T>> cell;     // rec-mid / rec-last
    SegHead<T> head;

    std::vector<Var<T>> forward(const Tensor<T>& images, bool training) {
        if (images.rank() != 4 || images.dim(1) != spec.in_channels)
            throw InvalidShapeError(cat("forward: expected (B,", spec.in_channels,
                                        ",H,W) input, got ", shape_str(images.shape)));
        const int B = images.dim(0), H = images.dim(2), W = images.dim(3);
        const int div = 1 << spec.depth;
        if (H % div != 0 || W % div != 0)
            throw InvalidShapeError(cat("forward: spatial dims ", H, "x", W,
                                        " not divisible by ", div));
        Var<T> x = constant(images);
        const int T_steps = spec.effective_steps();
        std::vector<Var<T>> logits;
        logits.reserve(T_steps);

        switch (spec.variant) {
            case Variant::unet_b:
            case Variant::unet_g: {
                logits.push_back(head((*core)(x, training)));
                break;
            }
            case Variant::rec_simple: {
                Var<T> s = constant(Tensor<T>({B, 1, H, W}, T(spec.s0_init)));
                for (int t = 0; t < T_steps; ++t) {
                    Var<T> l = head((*core)(concat_channels(x, s), training));
                    logits.push_back(l);
                    if (t + 1 < T_steps) s = softmax2_foreground(l);
                }
                break;
            }
            case Variant::rec_last: {
                Var<T> d = (*core)(x, training);  // body runs once; same image every step
                Var<T> h = constant(Tensor<T>({B, cell->hidden_ch, H, W}, T(spec.h0_init)));
                for (int t = 0; t < T_steps; ++t) {
                    h = cell->step(d, h);
                    logits.push_back(head(h));
                }
                break;
            }
            case Variant::rec_mid: {
                auto enc = trunk->encode(x, training);  // encoder runs once
                int hs = H >> spec.depth, ws = W >> spec.depth;
                Var<T> h = constant(Tensor<T>({B, cell->hidden_ch, hs, ws}, T(spec.h0_init)));
                for (int t = 0; t < T_steps; ++t) {
                    h = cell->step(enc.bottom, h);
                    logits.push_back(head(trunk->decode(h, enc.skips, training)));
                }
                break;
            }
            case Variant::runet_sru:
            case Variant::runet_dru: {
                Var<T> s = constant(Tensor<T>({B, 1, H, W}, T(spec.s0_init)));
                int hs = H >> spec.level, ws = W >> spec.level;
                Var<T> h = constant(
                    Tensor<T>({B, unit->hidden_channels, hs, ws}, T(spec.h0_init)));
                for (int t = 0; t < T_steps; ++t) {
                    auto enc = trunk->encode(concat_channels(x, s), training);
                    auto out = unit->step(enc.bottom, h, training);
                    h = out.h;
                    Var<T> l = head(trunk->decode(out.d, enc.skips, training));
                    logits.push_back(l);
                    if (t + 1 < T_steps) s = softmax2_foreground(l);
                }
                break;
            }
        }
        return logits;
    }
};

template <typename T>
Model<T> build_model(const ModelSpec& spec) {
    spec.validate();
    Model<T> m;
    m.spec = spec;
    ParamStore<T>& ps = m.store;
    const NormKind norm = spec.norm();
    const int base = spec.base_channels, depth = spec.depth;
    const int net_in = spec.in_channels + (spec.mask_feedback() ? 1 : 0);

    switch (spec.variant) {
        case Variant::unet_b:
        case Variant::unet_g:
        case Variant::rec_simple: {
            m.core.emplace(ps, "", net_in, base, depth, norm);
            m.head = SegHead<T>(ps, "head", m.core->out_channels());
            break;
        }
        case Variant::rec_last: {
            m.core.emplace(ps, "", net_in, base, depth, norm);
            m.cell.emplace(ps, "cell", m.core->out_channels(), m.core->out_channels());
            m.head = SegHead<T>(ps, "head", m.cell->hidden_ch);
            break;
        }
        case Variant::rec_mid: {
            m.trunk.emplace(ps, "", net_in, base, depth, norm);
            // hidden width = the bottleneck width the cell replaces (128 at
            // the default base/depth); decode consumes it directly
            m.cell.emplace(ps, "cell", m.trunk->bottom_channels(), m.trunk->mid_channels());
            m.head = SegHead<T>(ps, "head", m.trunk->out_channels());
            break;
        }
        case Variant::runet_sru:
        case Variant::runet_dru: {
            const int level = spec.level;
            m.trunk.emplace(ps, "", net_in, base, level, norm);
            m.unit.emplace(ps, "unit", m.trunk->bottom_channels(), base << level, depth - level,
                           norm, spec.variant == Variant::runet_dru);
            // decode consumes the unit's d output (base*2^level channels) and
            // returns base channels; at level 0 d itself is base wide
            m.head = SegHead<T>(ps, "head", base);
            break;
        }
    }
    return m;
}

}  // namespace runet
