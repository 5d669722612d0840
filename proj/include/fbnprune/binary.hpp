// SPDX-License-Identifier: Apache-2.0
//
// Little-endian encoding helpers shared by the checkpoint and signal-dump formats.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>

#include "fbnprune/error.hpp"

namespace fbnprune::binary {

template <typename T>
T byteswap(T v) {
    auto * p = reinterpret_cast<unsigned char *>(&v);
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) {
        std::swap(p[i], p[sizeof(T) - 1 - i]);
    }
    return v;
}

template <typename T>
void put(std::string & out, T v) {
    if constexpr (std::endian::native == std::endian::big) {
        v = byteswap(v);
    }
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.append(buf, sizeof(T));
}

inline void put_floats(std::string & out, std::span<const float> values) {
    if constexpr (std::endian::native == std::endian::little) {
        out.append(reinterpret_cast<const char *>(values.data()), values.size_bytes());
    } else {
        for (float v : values) put(out, v);
    }
}

/// Bounds-checked sequential reader; running off the end is a format error.
class Reader {
public:
    explicit Reader(std::string_view bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

    std::string_view take(std::size_t n) {
        if (n > bytes_.size() - pos_) {
            fail(ErrorKind::Format, what_ + ": truncated (needed " + std::to_string(n) + " more bytes at offset " +
                                        std::to_string(pos_) + ")");
        }
        std::string_view s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    template <typename T>
    T get() {
        std::string_view s = take(sizeof(T));
        T v;
        std::memcpy(&v, s.data(), sizeof(T));
        if constexpr (std::endian::native == std::endian::big) {
            v = byteswap(v);
        }
        return v;
    }

    void get_floats(std::span<float> out) {
        std::string_view s = take(out.size_bytes());
        std::memcpy(out.data(), s.data(), s.size());
        if constexpr (std::endian::native == std::endian::big) {
            for (float & v : out) v = byteswap(v);
        }
    }

    std::size_t remaining() const { return bytes_.size() - pos_; }

private:
    std::string_view bytes_;
    std::size_t pos_ = 0;
    std::string what_;
};

}  // namespace fbnprune::binary
