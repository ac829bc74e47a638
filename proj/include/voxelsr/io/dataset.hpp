#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "voxelsr/volume.hpp"

namespace voxelsr::io {

struct SplitManifest {
    std::vector<std::string> train, validation, evaluation, test;
    std::uint64_t seed = 0;
    std::array<double, 4> ratios{780, 111, 111, 111};

    [[nodiscard]] std::string to_json() const;
    [[nodiscard]] static SplitManifest from_json(const std::string& text);
};

// Part sizes by largest remainder: floor of each exact quota, then the
// leftover subjects one each to the largest fractional parts (ties to the
// earlier part).
[[nodiscard]] std::array<std::size_t, 4> split_sizes(std::size_t n, const std::array<double, 4>& ratios);

// Seeded Fisher-Yates shuffle, then contiguous parts in the order train,
// validation, evaluation, test. Needs at least 4 distinct ids.
[[nodiscard]] SplitManifest make_split(std::vector<std::string> ids, std::uint64_t seed,
                                       const std::array<double, 4>& ratios = {780, 111, 111, 111});

enum class PhantomRecipe { smooth_blobs, blobs_plus_tubes };

[[nodiscard]] std::string to_string(PhantomRecipe r);
[[nodiscard]] PhantomRecipe parse_recipe(const std::string& s);

// Sum of 8-16 Gaussian blobs; the tube recipe adds 3-6 straight bright
// cylinders 1-2 voxels wide on top of the same blobs. Min-max scaled to [0, 1].
[[nodiscard]] Volume synth_phantom(const Extent3& shape, std::uint64_t seed, PhantomRecipe recipe);

// In-place min-max scaling to [0, 1]; constant volumes become 0.
void normalize_unit_range(Volume& v);

}  // namespace voxelsr::io
