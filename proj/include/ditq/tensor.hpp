// Copyright (C) 2026 The ditq Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ditq/error.hpp"

namespace ditq {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

/// Dense row-major array with an explicit shape. Values are held at 64-bit
/// precision; low-bit storage is simulated by the quant module.
template <typename T>
class BasicTensor {
public:
    using value_type = T;

    BasicTensor() = default;

    explicit BasicTensor(Shape shape) : shape_(std::move(shape)), data_(shape_numel(shape_), T{}) {
        validate_shape();
    }

    BasicTensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        validate_shape();
        if (shape_numel(shape_) != data_.size()) {
            fail(ErrorCode::Dimension, "tensor shape " + shape_string(shape_) + " holds " +
                                           std::to_string(shape_numel(shape_)) + " elements but " +
                                           std::to_string(data_.size()) + " values were given");
        }
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    std::size_t dim(std::size_t axis) const {
        if (axis >= shape_.size()) {
            fail(ErrorCode::Dimension, "axis " + std::to_string(axis) + " out of range for " + shape_string(shape_));
        }
        return shape_[axis];
    }

    std::span<T> data() noexcept { return data_; }
    std::span<const T> data() const noexcept { return data_; }
    const std::vector<T>& values() const noexcept { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    T& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
    const T& at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

    BasicTensor reshaped(Shape shape) const {
        if (shape_numel(shape) != data_.size()) {
            fail(ErrorCode::Dimension, "cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
        }
        return BasicTensor(std::move(shape), data_);
    }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(static_cast<double>(v)); });
    }

    friend bool operator==(const BasicTensor&, const BasicTensor&) = default;

private:
    void validate_shape() const {
        for (std::size_t d : shape_) {
            if (d == 0) fail(ErrorCode::Dimension, "tensor dimensions must be positive, got " + shape_string(shape_));
        }
    }

    Shape shape_;
    std::vector<T> data_;
};

using Tensor = BasicTensor<double>;
using IntTensor = BasicTensor<std::int32_t>;

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        fail(ErrorCode::Dimension,
             std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    }
}

inline void require_rank(const Tensor& a, std::size_t rank, const char* op) {
    if (a.rank() != rank) {
        fail(ErrorCode::Dimension, std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                                       shape_string(a.shape()));
    }
}

inline Tensor identity(std::size_t n) {
    Tensor eye({n, n});
    for (std::size_t i = 0; i < n; ++i) eye.at(i, i) = 1.0;
    return eye;
}

/// Standard matrix product. Every output accumulates its k products left to
/// right starting from 0.0, so results are bit-reproducible; the loop nest
/// is i-k-j to keep the innermost loop contiguous without reordering sums.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
        fail(ErrorCode::Dimension, "matmul: incompatible shapes " + shape_string(a.shape()) + " and " +
                                       shape_string(b.shape()));
    }
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        double* oi = &out[i * n];
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = a[i * k + p];
            const double* bp = &b[p * n];
            for (std::size_t j = 0; j < n; ++j) oi[j] += aip * bp[j];
        }
    }
    return out;
}

inline Tensor transpose(const Tensor& a) {
    require_rank(a, 2, "transpose");
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    Tensor out({n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
    return out;
}

/// y = x W^T + b for x [rows x in], W [out x in], b [out]. Same
/// accumulation order as matmul(x, W^T), with the bias added last.
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    if (x.rank() != 2 || weight.rank() != 2 || x.shape()[1] != weight.shape()[1]) {
        fail(ErrorCode::Dimension, "linear: input " + shape_string(x.shape()) + " incompatible with weight " +
                                       shape_string(weight.shape()));
    }
    const std::size_t out_dim = weight.shape()[0];
    if (bias.rank() != 1 || bias.shape()[0] != out_dim) {
        fail(ErrorCode::Dimension, "linear: bias " + shape_string(bias.shape()) + " does not match weight " +
                                       shape_string(weight.shape()));
    }
    Tensor out = matmul(x, transpose(weight));
    const std::size_t rows = out.shape()[0];
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t o = 0; o < out_dim; ++o) out[r * out_dim + o] += bias[o];
    return out;
}

/// Numerically stable softmax along `axis` (max subtracted before exp).
inline Tensor softmax(const Tensor& x, std::size_t axis) {
    if (axis >= x.rank()) {
        fail(ErrorCode::Dimension, "softmax: axis " + std::to_string(axis) + " invalid for " + shape_string(x.shape()));
    }
    const Shape& s = x.shape();
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    const std::size_t len = s[axis];

    Tensor out(s);
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            double mx = x[base];
            for (std::size_t a = 1; a < len; ++a) mx = std::max(mx, x[base + a * inner]);
            double total = 0.0;
            for (std::size_t a = 0; a < len; ++a) {
                const double e = std::exp(x[base + a * inner] - mx);
                out[base + a * inner] = e;
                total += e;
            }
            for (std::size_t a = 0; a < len; ++a) out[base + a * inner] /= total;
        }
    }
    return out;
}

inline constexpr double kLayerNormEps = 1e-5;

/// Normalizes each row over the last axis to zero mean and unit (biased)
/// variance, then applies gain and bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = kLayerNormEps) {
    if (x.rank() == 0) fail(ErrorCode::Dimension, "layer_norm: scalar input");
    const std::size_t width = x.shape().back();
    if (gain.size() != width || bias.size() != width) {
        fail(ErrorCode::Dimension, "layer_norm: gain " + shape_string(gain.shape()) + " / bias " +
                                       shape_string(bias.shape()) + " do not match last axis of " +
                                       shape_string(x.shape()));
    }
    const std::size_t rows = x.size() / width;
    Tensor out(x.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = &x[r * width];
        double mean = 0.0;
        for (std::size_t i = 0; i < width; ++i) mean += xr[i];
        mean /= static_cast<double>(width);
        double var = 0.0;
        for (std::size_t i = 0; i < width; ++i) var += (xr[i] - mean) * (xr[i] - mean);
        var /= static_cast<double>(width);
        const double inv = 1.0 / std::sqrt(var + eps);
        for (std::size_t i = 0; i < width; ++i) out[r * width + i] = (xr[i] - mean) * inv * gain[i] + bias[i];
    }
    return out;
}

inline constexpr double kGeluCubic = 0.044715;

/// tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
inline double gelu(double x) {
    const double k = std::sqrt(2.0 / 3.14159265358979323846);
    return 0.5 * x * (1.0 + std::tanh(k * (x + kGeluCubic * x * x * x)));
}

inline Tensor gelu(const Tensor& x) {
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = gelu(x[i]);
    return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
    return out;
}

inline Tensor scaled(const Tensor& a, double k) {
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * k;
    return out;
}

inline double sum_squares(const Tensor& a) {
    double acc = 0.0;
    for (double v : a.data()) acc += v * v;
    return acc;
}

inline std::pair<double, double> min_max(std::span<const double> values) {
    if (values.empty()) fail(ErrorCode::Contract, "min_max: empty input");
    const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
    return {*lo, *hi};
}

}  // namespace ditq
