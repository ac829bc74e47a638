#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

#include "voxelsr/volume.hpp"

namespace voxelsr::io {

enum class NiftiErrorKind { io, header_size, magic, datatype, dims, offset, truncated };

class NiftiError : public std::runtime_error {
public:
    NiftiError(NiftiErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    [[nodiscard]] NiftiErrorKind kind() const noexcept { return kind_; }

private:
    NiftiErrorKind kind_;
};

inline constexpr std::size_t nifti_header_size = 348;

// Datatype codes handled here.
enum class NiftiType : std::int16_t { uint8 = 2, int16 = 4, int32 = 8, float32 = 16, float64 = 64 };

struct NiftiHeader {
    std::int32_t sizeof_hdr = 348;
    std::array<std::int16_t, 8> dim{};
    std::int16_t datatype = 16;
    std::int16_t bitpix = 32;
    std::array<float, 8> pixdim{};
    float vox_offset = 352;
    float scl_slope = 1;
    float scl_inter = 0;
    std::array<char, 4> magic{'n', '+', '1', '\0'};
    bool big_endian = false;
    // The 348 bytes as read (native order), carried so a template's other
    // fields survive a write.
    std::array<std::uint8_t, nifti_header_size> raw{};
};

// Parses the 348-byte header; byte order is detected from sizeof_hdr.
[[nodiscard]] NiftiHeader parse_nifti_header(const std::uint8_t* bytes, std::size_t size);

struct NiftiImage {
    Volume volume;
    NiftiHeader header;
};

// Reads .nii (magic "n+1") or a .hdr/.img pair ("ni1"). Values are scaled by
// scl_slope/scl_inter when the slope is non-zero.
[[nodiscard]] NiftiImage read_nifti(const std::filesystem::path& path);

// Little-endian float32 payload at offset 352, magic "n+1". Fields other than
// the geometry, datatype and scaling come from `header_template` when given.
void write_nifti(const Volume& v, const std::filesystem::path& path, const NiftiHeader* header_template = nullptr);

}  // namespace voxelsr::io
