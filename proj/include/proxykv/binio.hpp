// Copyright (C) 2026 ProxyKV Contributors
// SPDX-License-Identifier: Apache-2.0
//
// Byte-explicit little-endian primitives so file formats round-trip
// bit-exactly regardless of host conventions.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "proxykv/common.hpp"

namespace proxykv::binio {

inline void write_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) {
        b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
    }
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline void write_u64(std::ostream& os, uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) {
        b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
    }
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline void write_f32(std::ostream& os, float v) {
    write_u32(os, std::bit_cast<uint32_t>(v));
}

inline void write_f64(std::ostream& os, double v) {
    write_u64(os, std::bit_cast<uint64_t>(v));
}

inline bool read_exact(std::istream& is, void* dst, size_t n) {
    is.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
    return static_cast<size_t>(is.gcount()) == n;
}

inline uint32_t read_u32(std::istream& is, const char* what) {
    unsigned char b[4];
    PKV_CHECK(read_exact(is, b, 4), TruncatedFileError, "file truncated while reading ", what);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
        v |= static_cast<uint32_t>(b[i]) << (8 * i);
    }
    return v;
}

inline uint64_t read_u64(std::istream& is, const char* what) {
    unsigned char b[8];
    PKV_CHECK(read_exact(is, b, 8), TruncatedFileError, "file truncated while reading ", what);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
        v |= static_cast<uint64_t>(b[i]) << (8 * i);
    }
    return v;
}

inline float read_f32(std::istream& is, const char* what) {
    return std::bit_cast<float>(read_u32(is, what));
}

inline double read_f64(std::istream& is, const char* what) {
    return std::bit_cast<double>(read_u64(is, what));
}

}  // namespace proxykv::binio
