// Copyright (C) 2026 The ditq Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace ditq {

enum class ErrorCode {
    Dimension,   // shape mismatch between operands
    Config,      // invalid configuration value
    Contract,    // precondition of an operation violated
    Io,          // file could not be read or written
    Parse,       // malformed input file
};

inline std::string_view to_string(ErrorCode code) {
    switch (code) {
    case ErrorCode::Dimension: return "dimension";
    case ErrorCode::Config: return "config";
    case ErrorCode::Contract: return "contract";
    case ErrorCode::Io: return "io";
    case ErrorCode::Parse: return "parse";
    }
    return "unknown";
}

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

}  // namespace ditq
