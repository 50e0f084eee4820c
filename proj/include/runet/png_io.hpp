#pragma once

#include <png.h>

#include <cstdio>

#include "runet/tensor.hpp"

namespace runet {

// Interleaved 8-bit image, channels = 1 (grayscale) or 3 (RGB).
struct ImageU8 {
    int width = 0, height = 0, channels = 0;
    std::vector<uint8_t> pixels;

    uint8_t& at(int y, int x, int c) {
        return pixels[(static_cast<size_t>(y) * width + x) * channels + c];
    }
    uint8_t at(int y, int x, int c) const {
        return pixels[(static_cast<size_t>(y) * width + x) * channels + c];
    }
};

// Decodes any PNG into 8-bit gray or RGB: palette images expand to RGB,
// sub-byte and 16-bit depths normalize to 8, alpha is dropped.
inline ImageU8 read_png(const std::string& path) {
    FILE* fp = std::fopen(path.c_str(), "rb");
    if (!fp) throw IoError(cat("cannot open ", path, " for reading"));
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        if (png) png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw IoError("libpng: allocation failed");
    }

    ImageU8 out;
    std::vector<png_bytep> rows;
    if (setjmp(png_jmpbuf(png))) {  // libpng reports errors by longjmp
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw FormatError(cat("not a decodable PNG: ", path));
    }

    png_init_io(png, fp);
    png_read_info(png, info);

    png_byte color = png_get_color_type(png, info);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8)
        png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
    if (color & PNG_COLOR_MASK_ALPHA || png_get_valid(png, info, PNG_INFO_tRNS))
        png_set_strip_alpha(png);
    png_read_update_info(png, info);

    out.width = static_cast<int>(png_get_image_width(png, info));
    out.height = static_cast<int>(png_get_image_height(png, info));
    out.channels = static_cast<int>(png_get_channels(png, info));
    if (out.channels != 1 && out.channels != 3) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw FormatError(cat(path, ": unsupported channel count ", out.channels,
                              " after normalization"));
    }

    size_t stride = static_cast<size_t>(out.width) * out.channels;
    out.pixels.resize(stride * out.height);
    rows.resize(static_cast<size_t>(out.height));
    for (int y = 0; y < out.height; ++y) rows[static_cast<size_t>(y)] = out.pixels.data() + y * stride;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);

    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    return out;
}

inline void write_png(const std::string& path, const ImageU8& img) {
    if (img.channels != 1 && img.channels != 3)
        throw InvalidDataError(cat("write_png: channels must be 1 or 3, got ", img.channels));
    if (img.pixels.size() != static_cast<size_t>(img.width) * img.height * img.channels)
        throw InvalidDataError("write_png: pixel buffer does not match dimensions");

    FILE* fp = std::fopen(path.c_str(), "wb");
    if (!fp) throw IoError(cat("cannot open ", path, " for writing"));
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        if (png) png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw IoError("libpng: allocation failed");
    }

    std::vector<png_bytep> rows(static_cast<size_t>(img.height));
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw IoError(cat("failed writing PNG ", path));
    }

    png_init_io(png, fp);
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width),
                 static_cast<png_uint_32>(img.height), 8,
                 img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    size_t stride = static_cast<size_t>(img.width) * img.channels;
    // libpng takes non-const row pointers even on the write path
    for (int y = 0; y < img.height; ++y)
        rows[static_cast<size_t>(y)] = const_cast<png_bytep>(img.pixels.data() + y * stride);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);

    png_destroy_write_struct(&png, &info);
    if (std::fclose(fp) != 0) throw IoError(cat("failed closing ", path));
}

// ---- tensor conversions ----

// (3,H,W) float tensor in [0,1]; grayscale sources replicate their channel.
template <typename T = float>
Tensor<T> image_to_tensor(const ImageU8& img) {
    Tensor<T> t({3, img.height, img.width});
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x)
                t.ptr()[(static_cast<int64_t>(c) * img.height + y) * img.width + x] =
                    static_cast<T>(img.at(y, x, img.channels == 1 ? 0 : c)) / T(255);
    return t;
}

// (1,H,W) binary tensor using the 8-bit grayscale >= 128 foreground rule.
template <typename T = float>
Tensor<T> mask_to_tensor(const ImageU8& img) {
    Tensor<T> t({1, img.height, img.width});
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            t.ptr()[static_cast<int64_t>(y) * img.width + x] =
                img.at(y, x, 0) >= 128 ? T(1) : T(0);
    return t;
}

template <typename T>
ImageU8 tensor_to_image(const Tensor<T>& chw) {
    if (chw.rank() != 3 || (chw.dim(0) != 1 && chw.dim(0) != 3))
        throw InvalidShapeError(cat("tensor_to_image expects (1|3,H,W), got ",
                                    shape_str(chw.shape)));
    ImageU8 img;
    img.channels = chw.dim(0);
    img.height = chw.dim(1);
    img.width = chw.dim(2);
    img.pixels.resize(static_cast<size_t>(img.channels) * img.height * img.width);
    for (int c = 0; c < img.channels; ++c)
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x) {
                double v = chw.ptr()[(static_cast<int64_t>(c) * img.height + y) * img.width + x];
                v = std::min(1.0, std::max(0.0, v));
                img.at(y, x, c) = static_cast<uint8_t>(std::lround(v * 255.0));
            }
    return img;
}

}  // namespace runet
