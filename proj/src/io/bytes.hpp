#pragma once

// Explicit-endianness scalar access for the file formats.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <vector>

namespace voxelsr::io::bytes {

template <typename T>
T load(const std::uint8_t* p, bool big_endian) {
    std::uint8_t b[sizeof(T)];
    std::memcpy(b, p, sizeof(T));
    if (big_endian != (std::endian::native == std::endian::big)) std::reverse(b, b + sizeof(T));
    T v;
    std::memcpy(&v, b, sizeof(T));
    return v;
}

template <typename T>
void store_le(std::uint8_t* p, T v) {
    std::memcpy(p, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(p, p + sizeof(T));
}

template <typename T>
void append_le(std::vector<std::uint8_t>& out, T v) {
    const auto n = out.size();
    out.resize(n + sizeof(T));
    store_le(out.data() + n, v);
}

}  // namespace voxelsr::io::bytes
