#pragma once

#include <cmath>
#include <utility>

#include "runet/common.hpp"

namespace runet {

// Dense row-major tensor. Rank is dynamic (1..4 in practice); the invariant
// data.size() == product(shape) is established by the constructors and must be
// preserved by anyone mutating shape directly.
template <typename T>
struct Tensor {
    Shape shape;
    std::vector<T> data;

    Tensor() = default;

    explicit Tensor(Shape s) : shape(std::move(s)), data(checked_numel(shape), T(0)) {}

    Tensor(Shape s, T fill) : shape(std::move(s)), data(checked_numel(shape), fill) {}

    Tensor(Shape s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
        if (static_cast<int64_t>(data.size()) != shape_numel(shape))
            throw InvalidShapeError(cat("tensor data length ", data.size(),
                                        " does not match shape ", shape_str(shape)));
    }

    // Zero extents are legal (empty tensor); negative extents are not.
    static int64_t checked_numel(const Shape& s) {
        for (int d : s)
            if (d < 0) throw InvalidShapeError(cat("negative dim in shape ", shape_str(s)));
        return shape_numel(s);
    }

    int64_t size() const { return static_cast<int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }

    T* ptr() { return data.data(); }
    const T* ptr() const { return data.data(); }

    T& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
    const T& operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

    // Rank-4 (N,C,H,W) and rank-3 (C,H,W) accessors; hot loops index flat
    // offsets instead.
    T& at(int n, int c, int h, int w) {
        return data[((static_cast<int64_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w];
    }
    const T& at(int n, int c, int h, int w) const {
        return data[((static_cast<int64_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w];
    }
    T& at(int c, int h, int w) {
        return data[(static_cast<int64_t>(c) * shape[1] + h) * shape[2] + w];
    }
    const T& at(int c, int h, int w) const {
        return data[(static_cast<int64_t>(c) * shape[1] + h) * shape[2] + w];
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    void fill(T v) { std::fill(data.begin(), data.end(), v); }

    void zero() { fill(T(0)); }

    // Converts elementwise, e.g. float checkpoint -> double model.
    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.shape = shape;
        out.data.assign(data.begin(), data.end());
        return out;
    }
};

template <typename T>
bool all_finite(const Tensor<T>& t) {
    for (T v : t.data)
        if (!std::isfinite(v)) return false;
    return true;
}

}  // namespace runet
