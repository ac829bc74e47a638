#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>

#include "voxelsr/volume.hpp"

namespace voxelsr::io {

class RawError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class RawType { uint8, int16, int32, float32, float64 };

[[nodiscard]] std::size_t byte_width(RawType t);
[[nodiscard]] std::string to_string(RawType t);
[[nodiscard]] RawType parse_raw_type(const std::string& s);

// `{path}` holds the scalars, `{path}.json` the header (shape, dtype,
// endianness, voxel_size, subject_id). Writes are little-endian.
void write_raw(const Volume& v, const std::filesystem::path& path, RawType dtype = RawType::float32);
[[nodiscard]] Volume read_raw(const std::filesystem::path& path);

// Dispatches on the extension: .nii / .hdr to NIfTI, .vol to raw.
[[nodiscard]] Volume read_volume(const std::filesystem::path& path);
void write_volume(const Volume& v, const std::filesystem::path& path);

}  // namespace voxelsr::io
