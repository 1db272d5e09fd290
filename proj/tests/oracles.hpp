// Copyright (C) 2026 The ditq Authors
// SPDX-License-Identifier: Apache-2.0

// Brute-force reference implementations used by the tests. They are written
// independently of the library code paths (plain loops over raw vectors).

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "ditq/rng.hpp"
#include "ditq/tensor.hpp"

namespace oracle {

/// Round half away from zero without std::round.
inline double round_half_away(double x) {
    const double whole = std::trunc(x);
    const double frac = x - whole;
    if (frac >= 0.5) return whole + 1.0;
    if (frac <= -0.5) return whole - 1.0;
    return whole;
}

/// One element of quantize-then-dequantize on a signed b-bit grid.
inline double fake_quant_scalar(double v, double s, int bits) {
    const double hi = std::pow(2.0, bits - 1) - 1.0;
    const double lo = -std::pow(2.0, bits - 1);
    double q = round_half_away(v / s);
    if (q > hi) q = hi;
    if (q < lo) q = lo;
    return s * q;
}

inline double minmax_scale(const double* v, std::size_t n, int bits) {
    double m = 0.0;
    for (std::size_t i = 0; i < n; ++i) m = std::max(m, std::fabs(v[i]));
    return m == 0.0 ? 1.0 : m / (std::pow(2.0, bits - 1) - 1.0);
}

/// Fake-quantizes rows of length `unit` independently; returns the result.
inline std::vector<double> quantize_rows(const std::vector<double>& w, std::size_t unit, int bits) {
    std::vector<double> out(w.size());
    for (std::size_t r = 0; r * unit < w.size(); ++r) {
        const double s = minmax_scale(&w[r * unit], unit, bits);
        for (std::size_t i = 0; i < unit; ++i) out[r * unit + i] = fake_quant_scalar(w[r * unit + i], s, bits);
    }
    return out;
}

inline double squared_error(const std::vector<double>& a, const std::vector<double>& b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
    return acc;
}

inline double sqnr_db(const std::vector<double>& ref, const std::vector<double>& approx) {
    double sig = 0.0;
    for (double v : ref) sig += v * v;
    return 10.0 * std::log10(sig / squared_error(ref, approx));
}

inline std::vector<std::vector<double>> matmul(const std::vector<std::vector<double>>& a,
                                               const std::vector<std::vector<double>>& b) {
    std::vector<std::vector<double>> c(a.size(), std::vector<double>(b[0].size(), 0.0));
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < b[0].size(); ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < b.size(); ++k) acc += a[i][k] * b[k][j];
            c[i][j] = acc;
        }
    return c;
}

/// Seeded C_out x C_in Gaussian matrix in which round(fraction * numel)
/// distinct entries are multiplied by `scale`.
inline ditq::Tensor outlier_matrix(std::size_t rows, std::size_t cols, double fraction, double scale,
                                   std::uint64_t seed) {
    ditq::Rng rng(seed);
    ditq::Tensor w = rng.normal_tensor({rows, cols});
    const auto count = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(w.size())));
    std::vector<bool> hit(w.size(), false);
    for (std::size_t placed = 0; placed < count;) {
        const auto i = static_cast<std::size_t>(rng.below(w.size()));
        if (hit[i]) continue;
        hit[i] = true;
        w[i] *= scale;
        ++placed;
    }
    return w;
}

}  // namespace oracle
