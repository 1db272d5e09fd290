// Copyright (C) 2026 The ditq Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>

#include "ditq/tensor.hpp"

namespace ditq {

// std::mt19937_64 has a fully specified output sequence; the standard
// distributions do not, so the uniform and normal transforms are spelled
// out here to keep seeded streams identical across toolchains.
inline constexpr const char* kRngAlgorithm = "mt19937_64+box_muller";

class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) { return static_cast<std::uint64_t>(uniform() * static_cast<double>(n)); }

    double normal() {
        if (spare_) {
            const double z = *spare_;
            spare_.reset();
            return z;
        }
        // u1 in (0, 1] keeps log finite.
        const double u1 = static_cast<double>((engine_() >> 11) + 1) * 0x1.0p-53;
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        return r * std::cos(theta);
    }

    Tensor normal_tensor(const Shape& shape, double stddev = 1.0) {
        Tensor t(shape);
        for (double& v : t.data()) v = normal() * stddev;
        return t;
    }

    Tensor uniform_tensor(const Shape& shape, double lo, double hi) {
        Tensor t(shape);
        for (double& v : t.data()) v = lo + (hi - lo) * uniform();
        return t;
    }

private:
    std::mt19937_64 engine_;
    std::optional<double> spare_;
};

}  // namespace ditq
