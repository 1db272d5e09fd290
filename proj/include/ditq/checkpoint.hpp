// Copyright (C) 2026 The ditq Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Checkpoints are a directory holding
//   manifest.json  {"format":"ditq-checkpoint","version":1,"config":{...},
//                   "weights_file":"weights.bin","tensors":[{"name","shape"}]}
//   weights.bin    tensor archive, see below
//
// Tensor archive layout (all integers little-endian):
//   8 bytes  magic "DITQARC1"
//   u32      tensor count
//   per tensor: u32 name length, name bytes (UTF-8), u32 rank,
//               rank x u64 dims, numel x f32 values (IEEE-754, little-endian)

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "ditq/config.hpp"
#include "ditq/error.hpp"
#include "ditq/model.hpp"
#include "ditq/tensor.hpp"
#include <nlohmann/json.hpp>

namespace ditq {

inline constexpr std::array<char, 8> kArchiveMagic{'D', 'I', 'T', 'Q', 'A', 'R', 'C', '1'};
inline constexpr int kCheckpointVersion = 1;

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

class ByteReader {
public:
    ByteReader(const std::string& bytes, std::string source) : bytes_(bytes), source_(std::move(source)) {}

    std::uint64_t uint(int width) {
        need(static_cast<std::size_t>(width));
        std::uint64_t v = 0;
        for (int i = 0; i < width; ++i) {
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + static_cast<std::size_t>(i)]))
                 << (8 * i);
        }
        pos_ += static_cast<std::size_t>(width);
        return v;
    }

    std::string take(std::size_t n) {
        need(n);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    bool done() const { return pos_ == bytes_.size(); }

private:
    void need(std::size_t n) const {
        if (bytes_.size() - pos_ < n) {
            fail(ErrorCode::Parse, source_ + ": truncated archive at byte " + std::to_string(pos_));
        }
    }

    const std::string& bytes_;
    std::string source_;
    std::size_t pos_ = 0;
};

}  // namespace detail

/// Values are narrowed to float32; callers that need a bit-exact round trip
/// keep their tensors float32-representable.
inline std::string encode_archive(const std::vector<NamedTensor>& tensors) {
    std::string out(kArchiveMagic.begin(), kArchiveMagic.end());
    detail::put_u32(out, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
        out += name;
        detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
        for (std::size_t d : t.shape()) detail::put_u64(out, d);
        for (double v : t.data()) detail::put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    }
    return out;
}

inline std::vector<NamedTensor> decode_archive(const std::string& bytes, const std::string& source = "archive") {
    detail::ByteReader r(bytes, source);
    const std::string magic = r.take(kArchiveMagic.size());
    if (magic != std::string(kArchiveMagic.begin(), kArchiveMagic.end())) {
        fail(ErrorCode::Parse, source + ": bad magic, not a ditq tensor archive");
    }
    const auto count = r.uint(4);
    std::vector<NamedTensor> out;
    for (std::uint64_t k = 0; k < count; ++k) {
        NamedTensor nt;
        nt.name = r.take(r.uint(4));
        const auto rank = r.uint(4);
        if (rank == 0 || rank > 8) fail(ErrorCode::Parse, source + ": tensor '" + nt.name + "' has invalid rank");
        Shape shape;
        std::uint64_t numel = 1;
        for (std::uint64_t i = 0; i < rank; ++i) {
            const auto d = r.uint(8);
            if (d == 0 || d > (std::uint64_t{1} << 32)) {
                fail(ErrorCode::Parse, source + ": tensor '" + nt.name + "' has invalid dimension");
            }
            numel *= d;
            shape.push_back(static_cast<std::size_t>(d));
        }
        std::vector<double> data(static_cast<std::size_t>(numel));
        for (double& v : data) v = static_cast<double>(std::bit_cast<float>(static_cast<std::uint32_t>(r.uint(4))));
        nt.tensor = Tensor(std::move(shape), std::move(data));
        out.push_back(std::move(nt));
    }
    if (!r.done()) fail(ErrorCode::Parse, source + ": trailing bytes after last tensor");
    return out;
}

inline std::string read_binary_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCode::Io, "cannot open '" + path + "'");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_archive(const std::string& path, const std::vector<NamedTensor>& tensors) {
    write_text_file(path, encode_archive(tensors));
}

inline std::vector<NamedTensor> read_archive(const std::string& path) {
    return decode_archive(read_binary_file(path), path);
}

inline nlohmann::json checkpoint_manifest(const DenoiserModel& model) {
    nlohmann::json tensors = nlohmann::json::array();
    for (const auto& [name, t] : model.named_tensors()) tensors.push_back({{"name", name}, {"shape", t->shape()}});
    return {{"format", "ditq-checkpoint"},
            {"version", kCheckpointVersion},
            {"config", to_json(model.config())},
            {"weights_file", "weights.bin"},
            {"tensors", tensors}};
}

inline void save_checkpoint(const std::filesystem::path& dir, const DenoiserModel& model) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) fail(ErrorCode::Io, "cannot create '" + dir.string() + "': " + ec.message());
    std::vector<NamedTensor> tensors;
    for (const auto& [name, t] : model.named_tensors()) tensors.push_back({name, *t});
    write_text_file((dir / "manifest.json").string(), checkpoint_manifest(model).dump(2) + "\n");
    write_archive((dir / "weights.bin").string(), tensors);
}

inline DenoiserModel load_checkpoint(const std::filesystem::path& dir) {
    const std::string manifest_path = (dir / "manifest.json").string();
    const nlohmann::json manifest = read_json_file(manifest_path);
    auto require = [&](const char* key) -> const nlohmann::json& {
        if (!manifest.is_object() || !manifest.contains(key)) {
            fail(ErrorCode::Parse, manifest_path + ": missing field '" + key + "'");
        }
        return manifest.at(key);
    };
    if (!require("format").is_string() || require("format").get<std::string>() != "ditq-checkpoint") {
        fail(ErrorCode::Parse, manifest_path + ": field 'format' must be \"ditq-checkpoint\"");
    }
    if (!require("version").is_number_integer() || require("version").get<int>() != kCheckpointVersion) {
        fail(ErrorCode::Parse, manifest_path + ": field 'version' must be " + std::to_string(kCheckpointVersion));
    }
    ModelConfig cfg;
    try {
        cfg = model_config_from_json(require("config"), "config");
        validate(cfg);
    } catch (const Error& e) {
        fail(ErrorCode::Parse, manifest_path + ": " + e.what());
    }
    if (!require("weights_file").is_string()) fail(ErrorCode::Parse, manifest_path + ": field 'weights_file' must be a string");

    DenoiserModel model(cfg);
    const auto stored = read_archive((dir / require("weights_file").get<std::string>()).string());
    auto slots = model.named_tensors();
    if (stored.size() != slots.size()) {
        fail(ErrorCode::Parse, "checkpoint holds " + std::to_string(stored.size()) + " tensors, model expects " +
                                   std::to_string(slots.size()));
    }
    for (std::size_t i = 0; i < slots.size(); ++i) {
        if (stored[i].name != slots[i].first || stored[i].tensor.shape() != slots[i].second->shape()) {
            fail(ErrorCode::Parse, "checkpoint tensor #" + std::to_string(i) + " is '" + stored[i].name + "' " +
                                       shape_string(stored[i].tensor.shape()) + ", expected '" + slots[i].first +
                                       "' " + shape_string(slots[i].second->shape()));
        }
        *slots[i].second = stored[i].tensor;
    }
    return model;
}

}  // namespace ditq
