// Copyright (C) 2026 The ditq Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <png.h>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "ditq/error.hpp"
#include "ditq/tensor.hpp"

namespace ditq {

/// 8-bit rendering of a [C, H, W] tensor, min-max mapped to [0, 255].
/// Three channels become RGB; any other count is stacked vertically as
/// grayscale. A constant tensor renders black.
struct Image8 {
    std::uint32_t width = 0;
    std::uint32_t height = 0;
    bool rgb = false;
    std::vector<std::uint8_t> pixels;
};

inline Image8 render_image(const Tensor& x) {
    require_rank(x, 3, "render_image");
    if (!x.all_finite()) fail(ErrorCode::Contract, "render_image: tensor holds non-finite values");
    const std::size_t ch = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
    const auto [lo, hi] = min_max(x.data());
    const double span = hi - lo;
    auto to_byte = [&](double v) {
        if (span == 0.0) return std::uint8_t{0};
        return static_cast<std::uint8_t>(std::lround((v - lo) / span * 255.0));
    };
    Image8 img;
    img.width = static_cast<std::uint32_t>(w);
    if (ch == 3) {
        img.rgb = true;
        img.height = static_cast<std::uint32_t>(h);
        img.pixels.resize(h * w * 3);
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t c = 0; c < w; ++c)
                for (std::size_t k = 0; k < 3; ++k) img.pixels[(y * w + c) * 3 + k] = to_byte(x[(k * h + y) * w + c]);
    } else {
        img.height = static_cast<std::uint32_t>(ch * h);
        img.pixels.resize(ch * h * w);
        for (std::size_t i = 0; i < x.size(); ++i) img.pixels[i] = to_byte(x[i]);
    }
    return img;
}

inline void write_png(const std::string& path, const Image8& img) {
    png_image desc;
    std::memset(&desc, 0, sizeof(desc));
    desc.version = PNG_IMAGE_VERSION;
    desc.width = img.width;
    desc.height = img.height;
    desc.format = img.rgb ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
    if (!png_image_write_to_file(&desc, path.c_str(), 0, img.pixels.data(), 0, nullptr)) {
        const std::string msg = desc.message;
        png_image_free(&desc);
        fail(ErrorCode::Io, "cannot write PNG '" + path + "': " + msg);
    }
}

}  // namespace ditq
