// Copyright (C) 2026 ProxyKV Contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>

namespace proxykv {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
    using Error::Error;
};

struct ValueError : Error {
    using Error::Error;
};

struct NumericError : Error {
    using Error::Error;
};

struct ConfigError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

// Corrupted-file taxonomy shared by the trace and checkpoint formats.
struct BadMagicError : IoError {
    using IoError::IoError;
};

struct VersionMismatchError : IoError {
    using IoError::IoError;
};

struct TruncatedFileError : IoError {
    using IoError::IoError;
};

struct PayloadLengthError : IoError {
    using IoError::IoError;
};

namespace detail {

inline void concat_into(std::ostringstream&) {}

template <typename T, typename... Rest>
void concat_into(std::ostringstream& os, const T& head, const Rest&... rest) {
    os << head;
    concat_into(os, rest...);
}

}  // namespace detail

template <typename... Args>
std::string msg_cat(const Args&... args) {
    std::ostringstream os;
    detail::concat_into(os, args...);
    return os.str();
}

}  // namespace proxykv

#define PKV_CHECK(cond,ect, ...)                                  \
    do {                                                           \
        if (!(cond)) {                                             \
            throw ect(::proxykv::msg_cat(__VA_ARGS__));             \
        }                                                          \
    } while (0)

#define PKV_CHECK_SHAPE(cond, ...) PKV_CHECK(cond, ::proxykv::ShapeError, __VA_ARGS__)
#define PKV_CHECK_VALUE(cond, ...) PKV_CHECK(cond, ::proxykv::ValueError, __VA_ARGS__)
