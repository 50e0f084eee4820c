#pragma once

#include "runet/png_io.hpp"

namespace runet {

// Highlight color and blend weight for prediction overlays; exposed so tests
// can recompute the blend per pixel.
inline constexpr double kOverlayColor[3] = {1.0, 0.15, 0.1};
inline constexpr double kOverlayImageWeight = 0.6;

// Writes the image with predicted foreground (prob >= 0.5) alpha-blended in
// the highlight color: out = 0.6*img + 0.4*color on foreground pixels,
// untouched elsewhere.
template <typename T>
void export_overlay(const Tensor<T>& image, const Tensor<T>& prob, const std::string& path) {
    if (image.rank() != 3 || image.dim(0) != 3)
        throw InvalidShapeError(cat("export_overlay: image must be (3,H,W), got ",
                                    shape_str(image.shape)));
    if (prob.rank() != 3 || prob.dim(0) != 1 || prob.dim(1) != image.dim(1) ||
        prob.dim(2) != image.dim(2))
        throw InvalidShapeError(cat("export_overlay: prob must be (1,H,W) matching the image, got ",
                                    shape_str(prob.shape)));
    int H = image.dim(1), W = image.dim(2);
    Tensor<T> blended = image;
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            if (prob.ptr()[static_cast<int64_t>(y) * W + x] < T(0.5)) continue;
            for (int c = 0; c < 3; ++c) {
                T& v = blended.ptr()[(static_cast<int64_t>(c) * H + y) * W + x];
                v = static_cast<T>(kOverlayImageWeight * v +
                                   (1.0 - kOverlayImageWeight) * kOverlayColor[c]);
            }
        }
    write_png(path, tensor_to_image(blended));
}

}  // namespace runet
