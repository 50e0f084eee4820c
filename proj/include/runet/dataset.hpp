#pragma once

#include <algorithm>
#include <filesystem>

#include "runet/png_io.hpp"

namespace runet {

template <typename T = float>
struct SamplePair {
    Tensor<T> image;  // (3,H,W) in [0,1]
    Tensor<T> mask;   // (1,H,W) binary
    std::string id;   // basename without extension
};

template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& chw, int out_h, int out_w) {
    if (chw.rank() != 3) throw InvalidShapeError("bilinear_resize expects (C,H,W)");
    int C = chw.dim(0), H = chw.dim(1), W = chw.dim(2);
    if (H == out_h && W == out_w) return chw;
    Tensor<T> out({C, out_h, out_w});
    double sy = double(H) / out_h, sx = double(W) / out_w;
    for (int y = 0; y < out_h; ++y)
        for (int x = 0; x < out_w; ++x) {
            // pixel-center mapping, clamped at the borders
            double fy = std::max(0.0, std::min(double(H - 1), (y + 0.5) * sy - 0.5));
            double fx = std::max(0.0, std::min(double(W - 1), (x + 0.5) * sx - 0.5));
            int y0 = static_cast<int>(fy), x0 = static_cast<int>(fx);
            int y1 = std::min(y0 + 1, H - 1), x1 = std::min(x0 + 1, W - 1);
            double wy = fy - y0, wx = fx - x0;
            for (int c = 0; c < C; ++c) {
                auto px = [&](int yy, int xx) -> double {
                    return chw.ptr()[(static_cast<int64_t>(c) * H + yy) * W + xx];
                };
                double v = (1 - wy) * ((1 - wx) * px(y0, x0) + wx * px(y0, x1)) +
                           wy * ((1 - wx) * px(y1, x0) + wx * px(y1, x1));
                out.ptr()[(static_cast<int64_t>(c) * out_h + y) * out_w + x] = static_cast<T>(v);
            }
        }
    return out;
}

template <typename T>
Tensor<T> nearest_resize(const Tensor<T>& chw, int out_h, int out_w) {
    if (chw.rank() != 3) throw InvalidShapeError("nearest_resize expects (C,H,W)");
    int C = chw.dim(0), H = chw.dim(1), W = chw.dim(2);
    if (H == out_h && W == out_w) return chw;
    Tensor<T> out({C, out_h, out_w});
    for (int y = 0; y < out_h; ++y)
        for (int x = 0; x < out_w; ++x) {
            int sy = std::min(H - 1, static_cast<int>((y + 0.5) * H / out_h));
            int sx = std::min(W - 1, static_cast<int>((x + 0.5) * W / out_w));
            for (int c = 0; c < C; ++c)
                out.ptr()[(static_cast<int64_t>(c) * out_h + y) * out_w + x] =
                    chw.ptr()[(static_cast<int64_t>(c) * H + sy) * W + sx];
        }
    return out;
}

// Mirror index without edge duplication (…2,1,0,1,2… about each border),
// valid for any non-negative i.
inline int reflect_index(int i, int n) {
    if (n == 1) return 0;
    int period = 2 * (n - 1);
    i %= period;
    return i < n ? i : period - i;
}

// Pads a (C,H,W) tensor on the bottom and right edges to (out_h, out_w) by
// mirror reflection, so arbitrary sizes can feed a network that requires
// divisible spatial dims and the result crops back exactly.
template <typename T>
Tensor<T> reflect_pad_bottom_right(const Tensor<T>& chw, int out_h, int out_w) {
    if (chw.rank() != 3) throw InvalidShapeError("reflect_pad expects (C,H,W)");
    int C = chw.dim(0), H = chw.dim(1), W = chw.dim(2);
    if (out_h < H || out_w < W)
        throw InvalidShapeError(cat("reflect_pad: target ", out_h, "x", out_w,
                                    " smaller than input ", H, "x", W));
    if (out_h == H && out_w == W) return chw;
    Tensor<T> out({C, out_h, out_w});
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < out_h; ++y) {
            int sy = reflect_index(y, H);
            for (int x = 0; x < out_w; ++x)
                out.at(c, y, x) = chw.at(c, sy, reflect_index(x, W));
        }
    return out;
}

template <typename T>
Tensor<T> crop_top_left(const Tensor<T>& chw, int out_h, int out_w) {
    if (chw.rank() != 3) throw InvalidShapeError("crop_top_left expects (C,H,W)");
    int C = chw.dim(0), H = chw.dim(1), W = chw.dim(2);
    if (out_h > H || out_w > W)
        throw InvalidShapeError(cat("crop: target ", out_h, "x", out_w, " larger than input ", H,
                                    "x", W));
    if (out_h == H && out_w == W) return chw;
    Tensor<T> out({C, out_h, out_w});
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < out_h; ++y)
            std::copy_n(&chw.at(c, y, 0), out_w, &out.at(c, y, 0));
    return out;
}

// Loads `root/<split>/images/*.png` with masks of matching basenames from
// `root/<split>/masks/`, in lexicographic basename order. Masks binarize at
// the 8-bit 128 threshold. target_size > 0 resizes every pair to
// target_size x target_size (bilinear for images, nearest for masks).
template <typename T = float>
std::vector<SamplePair<T>> load_dataset(const std::string& root, const std::string& split,
                                        int target_size = 0) {
    namespace fs = std::filesystem;
    fs::path images_dir = fs::path(root) / split / "images";
    fs::path masks_dir = fs::path(root) / split / "masks";
    if (!fs::is_directory(images_dir))
        throw InvalidDataError(cat("missing images directory ", images_dir.string()));

    std::vector<std::string> names;
    for (const auto& entry : fs::directory_iterator(images_dir))
        if (entry.is_regular_file() && entry.path().extension() == ".png")
            names.push_back(entry.path().filename().string());
    std::sort(names.begin(), names.end());
    if (names.empty())
        throw InvalidDataError(cat("no .png images in split '", split, "' under ", root));

    std::vector<SamplePair<T>> out;
    out.reserve(names.size());
    for (const auto& name : names) {
        fs::path mask_path = masks_dir / name;
        if (!fs::exists(mask_path))
            throw InvalidDataError(cat("image ", name, " in split '", split,
                                       "' has no matching mask"));
        SamplePair<T> pair;
        pair.image = image_to_tensor<T>(read_png((images_dir / name).string()));
        pair.mask = mask_to_tensor<T>(read_png(mask_path.string()));
        if (pair.image.dim(1) != pair.mask.dim(1) || pair.image.dim(2) != pair.mask.dim(2))
            throw InvalidDataError(cat(name, ": image ", shape_str(pair.image.shape),
                                       " and mask ", shape_str(pair.mask.shape),
                                       " sizes disagree"));
        if (target_size > 0) {
            pair.image = bilinear_resize(pair.image, target_size, target_size);
            pair.mask = nearest_resize(pair.mask, target_size, target_size);
        }
        pair.id = fs::path(name).stem().string();
        out.push_back(std::move(pair));
    }
    return out;
}

// Stacks sample tensors into (B,3,H,W) images and (B,1,H,W) masks.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> stack_samples(const std::vector<SamplePair<T>>& data,
                                              const std::vector<size_t>& indices) {
    if (indices.empty()) throw ContractError("stack_samples: empty batch");
    const auto& first = data[indices[0]];
    int H = first.image.dim(1), W = first.image.dim(2);
    int B = static_cast<int>(indices.size());
    Tensor<T> images({B, 3, H, W}), masks({B, 1, H, W});
    for (int b = 0; b < B; ++b) {
        const auto& s = data[indices[size_t(b)]];
        if (s.image.dim(1) != H || s.image.dim(2) != W)
            throw InvalidDataError(cat("sample ", s.id, " has size ", s.image.dim(1), "x",
                                       s.image.dim(2), " but the batch expects ", H, "x", W,
                                       "; set a training size to normalize"));
        std::copy_n(s.image.ptr(), s.image.size(), images.ptr() + int64_t(b) * s.image.size());
        std::copy_n(s.mask.ptr(), s.mask.size(), masks.ptr() + int64_t(b) * s.mask.size());
    }
    return {std::move(images), std::move(masks)};
}

}  // namespace runet
