#pragma once

#include "runet/layers.hpp"

namespace runet {

struct UNetConfig {
    int in_channels = 3;  // network input width (image channels + 1 when a mask is concatenated)
    int base_channels = 8;
    int depth = 4;  // pooling levels
    NormKind norm = NormKind::group;
    int out_classes = 2;
};

// Encoder-decoder shell covering levels 0..levels-1: per-level conv blocks with
// pooling on the way down and conv-transpose + skip concat + conv block on the
// way up. The middle of the network (whatever sits below the last pooling) is
// supplied by the caller, which lets the same shell serve the full backbone,
// the gate subnetworks, and the truncated outer network of the recurrent
// variants. levels == 0 degenerates to the identity shell.
//
// Channel bookkeeping: encoder level i outputs base*2^i; the activation
// entering level i (after i poolings) has in_ch channels for i == 0 and
// base*2^(i-1) otherwise; decode expects a middle tensor of base*2^levels
// channels and returns base channels at full resolution.
template <typename T>
struct UNetTrunk {
    int levels = 0, in_ch = 0, base = 0;
    std::vector<ConvBlock<T>> enc;
    std::vector<ConvTranspose2dLayer<T>> up;
    std::vector<ConvBlock<T>> dec;

    UNetTrunk() = default;
    UNetTrunk(ParamStore<T>& ps, const std::string& prefix, int in_ch_, int base_, int levels_,
              NormKind norm)
        : levels(levels_), in_ch(in_ch_), base(base_) {
        for (int i = 0; i < levels; ++i) {
            enc.emplace_back(ps, cat(prefix, "enc.", i), i == 0 ? in_ch : base << (i - 1),
                             base << i, norm);
            up.emplace_back(ps, cat(prefix, "up.", i), base << (i + 1), base << i);
            dec.emplace_back(ps, cat(prefix, "dec.", i), (base << i) * 2, base << i, norm);
        }
    }

    int bottom_channels() const { return levels == 0 ? in_ch : base << (levels - 1); }
    int mid_channels() const { return base << levels; }
    int out_channels() const { return levels == 0 ? in_ch : base; }

    struct Encoded {
        std::vector<Var<T>> skips;  // pre-pooling activations, levels 0..levels-1
        Var<T> bottom;              // input to whatever sits below the last pooling
    };

    Encoded encode(const Var<T>& x, bool training) const {
        Encoded out;
        Var<T> cur = x;
        for (int i = 0; i < levels; ++i) {
            Var<T> e = enc[i](cur, training);
            out.skips.push_back(e);
            cur = max_pool2d(e);
        }
        out.bottom = cur;
        return out;
    }

    Var<T> decode(const Var<T>& mid, const std::vector<Var<T>>& skips, bool training) const {
        if (static_cast<int>(skips.size()) != levels)
            throw InvalidShapeError(cat("decode: got ", skips.size(), " skips for ", levels,
                                        " levels"));
        Var<T> cur = mid;
        for (int i = levels - 1; i >= 0; --i)
            cur = dec[i](concat_channels(up[i](cur), skips[i]), training);
        return cur;
    }
};

// Trunk plus the middle conv block: a complete encoder-decoder network. The
// middle maps the trunk's bottom activation to base*2^depth channels; decode
// brings it back to base channels at full resolution. depth == 0 means the
// network is just the middle block (whose output then IS base*2^0 = base wide,
// since base here is the subnet's own first-level width).
template <typename T>
struct EncoderDecoder {
    UNetTrunk<T> trunk;
    ConvBlock<T> middle;

    EncoderDecoder() = default;
    EncoderDecoder(ParamStore<T>& ps, const std::string& prefix, int in_ch, int base, int depth,
                   NormKind norm)
        : trunk(ps, prefix, in_ch, base, depth, norm),
          middle(ps, prefix + "bottleneck", trunk.bottom_channels(), base << depth, norm) {}

    int out_channels() const { return trunk.base; }

    Var<T> operator()(const Var<T>& x, bool training) const {
        auto e = trunk.encode(x, training);
        Var<T> mid = middle(e.bottom, training);
        return trunk.decode(mid, e.skips, training);
    }
};

// Final classification head: 1x1 conv from the decoder width to 2 class
// logits; foreground probability is the softmax of channel 1 against 0.
template <typename T>
struct SegHead {
    Conv2dLayer<T> conv;

    SegHead() = default;
    SegHead(ParamStore<T>& ps, const std::string& prefix, int in_ch, int classes = 2)
        : conv(ps, prefix, in_ch, classes, 1, 1, 0) {}

    Var<T> operator()(const Var<T>& d) const { return conv(d); }
};

}  // namespace runet
