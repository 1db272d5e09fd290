// Copyright (C) 2026 The ditq Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ditq/error.hpp"
#include "ditq/tensor.hpp"
#include <nlohmann/json.hpp>

namespace ditq {

// ---------------------------------------------------------------------------
// Integer grid
// ---------------------------------------------------------------------------

struct IntGrid {
    int bits = 8;
    bool is_signed = true;
    std::int32_t c_min = -128;
    std::int32_t c_max = 127;

    friend bool operator==(const IntGrid&, const IntGrid&) = default;
};

inline IntGrid make_grid(int bits, bool is_signed) {
    if (bits < 2 || bits > 16) {
        fail(ErrorCode::Config, "bit width must lie in [2, 16], got " + std::to_string(bits));
    }
    if (is_signed) {
        const std::int32_t half = std::int32_t{1} << (bits - 1);
        return {bits, true, -half, half - 1};
    }
    return {bits, false, 0, (std::int32_t{1} << bits) - 1};
}

// Symmetric min-max calibration maps max|v| onto c_max so the extreme value
// stays representable on both signed and unsigned grids.
inline double scale_divisor(const IntGrid& grid) { return static_cast<double>(grid.c_max); }

// ---------------------------------------------------------------------------
// Granularity and quant-unit layout
// ---------------------------------------------------------------------------

struct Granularity {
    enum class Kind { PerTensor, PerChannel, PerGroup };

    Kind kind = Kind::PerTensor;
    std::size_t axis = 0;        // channel axis (PerChannel) or grouped axis (PerGroup)
    std::size_t group_size = 0;  // PerGroup only

    static Granularity per_tensor() { return {}; }
    static Granularity per_channel(std::size_t axis = 0) { return {Kind::PerChannel, axis, 0}; }
    static Granularity per_group(std::size_t axis, std::size_t group_size) {
        return {Kind::PerGroup, axis, group_size};
    }

    friend bool operator==(const Granularity&, const Granularity&) = default;
};

inline std::string to_string(Granularity::Kind kind) {
    switch (kind) {
    case Granularity::Kind::PerTensor: return "per_tensor";
    case Granularity::Kind::PerChannel: return "per_channel";
    case Granularity::Kind::PerGroup: return "per_group";
    }
    return "unknown";
}

namespace detail {

struct AxisSplit {
    std::size_t outer = 1;
    std::size_t len = 1;
    std::size_t inner = 1;
};

inline AxisSplit split_at(const Shape& shape, std::size_t axis) {
    AxisSplit s;
    for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
    s.len = shape[axis];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

}  // namespace detail

inline void validate_granularity(const Granularity& gran, const Shape& shape) {
    using Kind = Granularity::Kind;
    if (gran.kind == Kind::PerTensor) return;
    if (gran.axis >= shape.size()) {
        fail(ErrorCode::Config, to_string(gran.kind) + " axis " + std::to_string(gran.axis) + " invalid for shape " +
                                    shape_string(shape));
    }
    if (gran.kind == Kind::PerGroup) {
        const std::size_t len = shape[gran.axis];
        if (gran.group_size < 1 || len % gran.group_size != 0) {
            fail(ErrorCode::Config, "group size " + std::to_string(gran.group_size) + " does not divide axis length " +
                                        std::to_string(len) + " of shape " + shape_string(shape));
        }
    }
}

inline std::size_t num_quant_units(const Granularity& gran, const Shape& shape) {
    validate_granularity(gran, shape);
    switch (gran.kind) {
    case Granularity::Kind::PerTensor: return 1;
    case Granularity::Kind::PerChannel: return shape[gran.axis];
    case Granularity::Kind::PerGroup: {
        const auto s = detail::split_at(shape, gran.axis);
        return s.outer * (s.len / gran.group_size) * s.inner;
    }
    }
    return 1;
}

/// Quant-unit index of every element, in row-major element order. Groups are
/// contiguous runs of `group_size` along the grouped axis, numbered in the
/// order a row-major reshape to (-1, group_size) would produce for the last axis.
inline std::vector<std::size_t> quant_unit_map(const Granularity& gran, const Shape& shape) {
    const std::size_t n = shape_numel(shape);
    std::vector<std::size_t> units(n, 0);
    validate_granularity(gran, shape);
    if (gran.kind == Granularity::Kind::PerTensor) return units;
    const auto s = detail::split_at(shape, gran.axis);
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t a = 0; a < s.len; ++a) {
            for (std::size_t i = 0; i < s.inner; ++i) {
                const std::size_t flat = (o * s.len + a) * s.inner + i;
                if (gran.kind == Granularity::Kind::PerChannel) {
                    units[flat] = a;
                } else {
                    const std::size_t groups = s.len / gran.group_size;
                    units[flat] = (o * groups + a / gran.group_size) * s.inner + i;
                }
            }
        }
    }
    return units;
}

// ---------------------------------------------------------------------------
// Quantization parameters
// ---------------------------------------------------------------------------

struct QuantParams {
    IntGrid grid;
    std::vector<double> scales;
    Granularity granularity;

    friend bool operator==(const QuantParams&, const QuantParams&) = default;
};

inline void validate_params(const QuantParams& p, const Shape& shape) {
    const std::size_t units = num_quant_units(p.granularity, shape);
    if (p.scales.size() != units) {
        fail(ErrorCode::Dimension, "quant params carry " + std::to_string(p.scales.size()) + " scales but shape " +
                                       shape_string(shape) + " needs " + std::to_string(units) + " for " +
                                       to_string(p.granularity.kind));
    }
    for (double s : p.scales) {
        if (!(s > 0.0) || !std::isfinite(s)) {
            fail(ErrorCode::Contract, "quant scale must be positive and finite, got " + std::to_string(s));
        }
    }
}

/// round-half-away-from-zero, then clip to the grid.
inline std::int32_t quantize_value(double v, double scale, const IntGrid& grid) {
    const double r = std::round(v / scale);
    const double clipped = std::clamp(r, static_cast<double>(grid.c_min), static_cast<double>(grid.c_max));
    return static_cast<std::int32_t>(clipped);
}

inline IntTensor quantize(const Tensor& v, const QuantParams& p) {
    validate_params(p, v.shape());
    const auto units = quant_unit_map(p.granularity, v.shape());
    IntTensor q(v.shape());
    for (std::size_t i = 0; i < v.size(); ++i) q[i] = quantize_value(v[i], p.scales[units[i]], p.grid);
    return q;
}

inline Tensor dequantize(const IntTensor& q, const QuantParams& p) {
    validate_params(p, q.shape());
    const auto units = quant_unit_map(p.granularity, q.shape());
    Tensor v(q.shape());
    for (std::size_t i = 0; i < q.size(); ++i) {
        if (q[i] < p.grid.c_min || q[i] > p.grid.c_max) {
            fail(ErrorCode::Contract, "integer " + std::to_string(q[i]) + " at index " + std::to_string(i) +
                                          " lies outside grid [" + std::to_string(p.grid.c_min) + ", " +
                                          std::to_string(p.grid.c_max) + "]");
        }
        v[i] = p.scales[units[i]] * static_cast<double>(q[i]);
    }
    return v;
}

/// dequantize(quantize(v)) in one pass; same arithmetic as the two-step path.
inline Tensor fake_quant(const Tensor& v, const QuantParams& p) {
    validate_params(p, v.shape());
    const auto units = quant_unit_map(p.granularity, v.shape());
    Tensor out(v.shape());
    for (std::size_t i = 0; i < v.size(); ++i) {
        const double s = p.scales[units[i]];
        out[i] = s * static_cast<double>(quantize_value(v[i], s, p.grid));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Calibration
// ---------------------------------------------------------------------------

inline constexpr double kZeroRangeScale = 1.0;

/// s = max(|min|, |max|) / c_max; an all-zero input yields 1.0.
inline double scale_from_range(double lo, double hi, const IntGrid& grid) {
    const double max_abs = std::max(std::abs(lo), std::abs(hi));
    if (max_abs == 0.0) return kZeroRangeScale;
    return max_abs / scale_divisor(grid);
}

inline double calibrate_minmax(std::span<const double> values, const IntGrid& grid) {
    if (values.empty()) fail(ErrorCode::Contract, "calibrate_minmax: no values to calibrate on");
    const auto [lo, hi] = min_max(values);
    return scale_from_range(lo, hi, grid);
}

/// Min-max calibration of every quant unit of `v` independently.
inline QuantParams calibrate(const Tensor& v, const IntGrid& grid, const Granularity& gran) {
    const std::size_t n_units = num_quant_units(gran, v.shape());
    const auto units = quant_unit_map(gran, v.shape());
    std::vector<double> max_abs(n_units, 0.0);
    for (std::size_t i = 0; i < v.size(); ++i) max_abs[units[i]] = std::max(max_abs[units[i]], std::abs(v[i]));
    QuantParams p{grid, std::vector<double>(n_units), gran};
    for (std::size_t u = 0; u < n_units; ++u) p.scales[u] = scale_from_range(-max_abs[u], max_abs[u], grid);
    return p;
}

struct QuantizedWeight {
    QuantParams params;
    Tensor weight;  // fake-quantized, same shape as the input
};

inline void require_weight_matrix(const Tensor& w, const char* op) {
    if (w.rank() != 2) {
        fail(ErrorCode::Dimension, std::string(op) + ": weight must be 2-D [C_out x C_in], got " +
                                       shape_string(w.shape()));
    }
}

inline QuantizedWeight group_quantize(const Tensor& w, int bits, std::size_t group_size);

/// Weight quantization on the signed grid. PerChannel runs along the output
/// channel axis; PerGroup delegates to group_quantize.
inline QuantizedWeight quantize_weights(const Tensor& w, int bits, const Granularity& gran) {
    require_weight_matrix(w, "quantize_weights");
    const IntGrid grid = make_grid(bits, true);
    if (gran.kind == Granularity::Kind::PerGroup) {
        if (gran.axis != 1) {
            fail(ErrorCode::Config, "quantize_weights: groups must run along the input axis (1), got axis " +
                                        std::to_string(gran.axis));
        }
        return group_quantize(w, bits, gran.group_size);
    }
    if (gran.kind == Granularity::Kind::PerChannel && gran.axis != 0) {
        fail(ErrorCode::Config, "quantize_weights: channels run along the output axis (0), got axis " +
                                    std::to_string(gran.axis));
    }
    QuantParams p = calibrate(w, grid, gran);
    Tensor wq = fake_quant(w, p);
    return {std::move(p), std::move(wq)};
}

/// Group-wise weight quantization: view W [C_out x C_in] as rows of length g,
/// calibrate each row on its own, and restore the original shape. With
/// g == C_in the rows are the output channels and the result is per-channel.
inline QuantizedWeight group_quantize(const Tensor& w, int bits, std::size_t group_size) {
    require_weight_matrix(w, "group_quantize");
    const std::size_t c_in = w.shape()[1];
    if (group_size < 1 || c_in % group_size != 0) {
        fail(ErrorCode::Config, "group_quantize: C_in = " + std::to_string(c_in) +
                                    " is not divisible by group size g = " + std::to_string(group_size));
    }
    if (group_size == c_in) return quantize_weights(w, bits, Granularity::per_channel(0));

    const Shape original = w.shape();
    const Tensor rows = w.reshaped({w.size() / group_size, group_size});
    const IntGrid grid = make_grid(bits, true);
    QuantParams row_params = calibrate(rows, grid, Granularity::per_channel(0));
    Tensor wq = fake_quant(rows, row_params).reshaped(original);

    // Scales are already in unit order for PerGroup(axis=1, g) on the 2-D view.
    QuantParams p{grid, std::move(row_params.scales), Granularity::per_group(1, group_size)};
    return {std::move(p), std::move(wq)};
}

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

inline constexpr int kQuantParamsSchemaVersion = 1;

inline nlohmann::json to_json(const QuantParams& p) {
    nlohmann::json gran = {{"kind", to_string(p.granularity.kind)}};
    if (p.granularity.kind != Granularity::Kind::PerTensor) gran["axis"] = p.granularity.axis;
    if (p.granularity.kind == Granularity::Kind::PerGroup) gran["group_size"] = p.granularity.group_size;
    return {{"version", kQuantParamsSchemaVersion},
            {"bits", p.grid.bits},
            {"signed", p.grid.is_signed},
            {"granularity", gran},
            {"scales", p.scales}};
}

inline QuantParams quant_params_from_json(const nlohmann::json& j) {
    auto field = [&](const nlohmann::json& obj, const char* name) -> const nlohmann::json& {
        if (!obj.is_object() || !obj.contains(name)) {
            fail(ErrorCode::Parse, std::string("quant params: missing field '") + name + "'");
        }
        return obj.at(name);
    };
    try {
        const int version = field(j, "version").get<int>();
        if (version != kQuantParamsSchemaVersion) {
            fail(ErrorCode::Parse, "quant params: unsupported version " + std::to_string(version));
        }
        QuantParams p;
        p.grid = make_grid(field(j, "bits").get<int>(), field(j, "signed").get<bool>());
        const auto& g = field(j, "granularity");
        const auto kind = field(g, "kind").get<std::string>();
        if (kind == "per_tensor") {
            p.granularity = Granularity::per_tensor();
        } else if (kind == "per_channel") {
            p.granularity = Granularity::per_channel(field(g, "axis").get<std::size_t>());
        } else if (kind == "per_group") {
            p.granularity = Granularity::per_group(field(g, "axis").get<std::size_t>(),
                                                   field(g, "group_size").get<std::size_t>());
        } else {
            fail(ErrorCode::Parse, "quant params: unknown granularity kind '" + kind + "'");
        }
        p.scales = field(j, "scales").get<std::vector<double>>();
        for (double s : p.scales) {
            if (!(s > 0.0) || !std::isfinite(s)) fail(ErrorCode::Parse, "quant params: non-positive scale");
        }
        return p;
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::Parse, std::string("quant params: ") + e.what());
    }
}

}  // namespace ditq
