#pragma once

// Little-endian primitives shared by the token-stream and checkpoint formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "xlab/common.hpp"

namespace xlab::detail {

template <typename U>
void put_le(std::ostream& os, U value) {
    static_assert(std::is_unsigned_v<U>);
    char bytes[sizeof(U)];
    for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<char>(value >> (8 * i));
    os.write(bytes, sizeof(U));
}

template <typename U>
U get_le(std::istream& is) {
    static_assert(std::is_unsigned_v<U>);
    unsigned char bytes[sizeof(U)];
    if (!is.read(reinterpret_cast<char*>(bytes), sizeof(U))) throw FormatError("unexpected end of file");
    U value = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(bytes[i]) << (8 * i);
    return value;
}

inline void put_f32(std::ostream& os, float v) { put_le<std::uint32_t>(os, std::bit_cast<std::uint32_t>(v)); }
inline float get_f32(std::istream& is) { return std::bit_cast<float>(get_le<std::uint32_t>(is)); }

inline void put_bytes(std::ostream& os, const void* data, std::size_t n) {
    os.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
}

inline void get_bytes(std::istream& is, void* data, std::size_t n) {
    if (!is.read(static_cast<char*>(data), static_cast<std::streamsize>(n))) {
        throw FormatError("unexpected end of file");
    }
}

}  // namespace xlab::detail
