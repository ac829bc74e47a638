#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

#include "voxelsr/models/network.hpp"

namespace voxelsr::models {

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t checkpoint_version = 1;

struct CheckpointInfo {
    std::uint32_t version = checkpoint_version;
    std::string config;  // render() of the model config
    int value_width = 8;  // bytes per stored value: 4 or 8
    std::int64_t step = 0;
};

// Layout (all integers little-endian):
//   "VXSRCKPT" u32 version, u32+bytes config, u8 width, i64 step, u32 records
//   record: u8 kind (0 parameter, 1 norm statistics), u32+bytes name,
//           parameter -> u32 rank, i64 dims[rank], values
//           statistics -> i64 channels, mean values, var values, i64 tracked, f64 momentum
//           u32 CRC-32 of the record bytes above
template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ModelParams<T>& params, std::int64_t step = 0);

// Values are converted to T when the stored width differs. Names and shapes
// are checked against the layout the stored config implies.
template <typename T>
ModelParams<T> load_checkpoint(const std::filesystem::path& path, CheckpointInfo* info = nullptr);

[[nodiscard]] CheckpointInfo read_checkpoint_info(const std::filesystem::path& path);

}  // namespace voxelsr::models
