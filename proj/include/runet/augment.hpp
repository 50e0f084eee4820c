#pragma once

#include "runet/tensor.hpp"

namespace runet {

// Shared geometric transform for an (image, mask) pair: rotation about the
// image center followed by an optional horizontal flip.
struct AugmentParams {
    double angle_deg = 0;
    bool flip = false;
};

inline AugmentParams sample_augment(std::mt19937_64& rng, double max_angle_deg = 10.0) {
    std::uniform_real_distribution<double> angle(-max_angle_deg, max_angle_deg);
    std::bernoulli_distribution coin(0.5);
    AugmentParams p;
    p.angle_deg = angle(rng);
    p.flip = coin(rng);
    return p;
}

template <typename T>
Tensor<T> hflip(const Tensor<T>& chw) {
    if (chw.rank() != 3) throw InvalidShapeError("hflip expects a (C,H,W) tensor");
    int C = chw.dim(0), H = chw.dim(1), W = chw.dim(2);
    Tensor<T> out(chw.shape);
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < H; ++y) {
            const T* src = chw.ptr() + (static_cast<int64_t>(c) * H + y) * W;
            T* dst = out.ptr() + (static_cast<int64_t>(c) * H + y) * W;
            for (int x = 0; x < W; ++x) dst[x] = src[W - 1 - x];
        }
    return out;
}

// Rotates counterclockwise about the pixel center (W-1)/2, (H-1)/2 with
// bilinear sampling; out-of-bounds source coordinates read as 0. Angle 0 is an
// exact identity: the source coordinates reduce to the integer grid and the
// corner weights collapse to 1.
template <typename T>
Tensor<T> rotate_bilinear(const Tensor<T>& chw, double angle_deg) {
    if (chw.rank() != 3) throw InvalidShapeError("rotate_bilinear expects a (C,H,W) tensor");
    int C = chw.dim(0), H = chw.dim(1), W = chw.dim(2);
    Tensor<T> out(chw.shape);
    double rad = angle_deg * 3.14159265358979323846 / 180.0;
    double cs = std::cos(rad), sn = std::sin(rad);
    double cx = (W - 1) / 2.0, cy = (H - 1) / 2.0;
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            // inverse mapping: rotate the destination pixel back into source space
            double dx = x - cx, dy = y - cy;
            double sx = cx + cs * dx + sn * dy;
            double sy = cy - sn * dx + cs * dy;
            int x0 = static_cast<int>(std::floor(sx)), y0 = static_cast<int>(std::floor(sy));
            double fx = sx - x0, fy = sy - y0;
            for (int c = 0; c < C; ++c) {
                auto sample = [&](int yy, int xx) -> double {
                    if (xx < 0 || xx >= W || yy < 0 || yy >= H) return 0.0;
                    return chw.ptr()[(static_cast<int64_t>(c) * H + yy) * W + xx];
                };
                double v = (1 - fy) * ((1 - fx) * sample(y0, x0) + fx * sample(y0, x0 + 1)) +
                           fy * ((1 - fx) * sample(y0 + 1, x0) + fx * sample(y0 + 1, x0 + 1));
                out.ptr()[(static_cast<int64_t>(c) * H + y) * W + x] = static_cast<T>(v);
            }
        }
    return out;
}

template <typename T>
Tensor<T> rebinarize(const Tensor<T>& mask, T threshold = T(0.5)) {
    Tensor<T> out(mask.shape);
    for (int64_t i = 0; i < mask.size(); ++i) out[i] = mask[i] >= threshold ? T(1) : T(0);
    return out;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> apply_augment(const Tensor<T>& image, const Tensor<T>& mask,
                                              const AugmentParams& p) {
    if (image.rank() != 3 || mask.rank() != 3 || image.dim(1) != mask.dim(1) ||
        image.dim(2) != mask.dim(2))
        throw InvalidShapeError(cat("augment: image ", shape_str(image.shape),
                                    " and mask ", shape_str(mask.shape), " must share H,W"));
    Tensor<T> img = image, msk = mask;
    if (p.angle_deg != 0.0) {
        img = rotate_bilinear(img, p.angle_deg);
        msk = rotate_bilinear(msk, p.angle_deg);
    }
    if (p.flip) {
        img = hflip(img);
        msk = hflip(msk);
    }
    return {std::move(img), rebinarize(msk)};
}

// One transform sampled per pair, applied identically to both tensors; the
// mask comes back binary.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> augment_pair(const Tensor<T>& image, const Tensor<T>& mask,
                                             std::mt19937_64& rng) {
    return apply_augment(image, mask, sample_augment(rng));
}

}  // namespace runet
