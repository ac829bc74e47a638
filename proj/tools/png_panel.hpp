#pragma once

#include <filesystem>
#include <vector>

#include "voxelsr/volume.hpp"

namespace voxelsr::cli {

// Side-by-side slice panels: one column per volume, one row per orientation
// (axial, coronal, sagittal through the given voxel). Gray levels map
// [lo, hi] to [0, 255].
void write_slice_panel(const std::filesystem::path& path, const std::vector<const Volume*>& columns,
                       const Extent3& center, double lo, double hi);

}  // namespace voxelsr::cli
