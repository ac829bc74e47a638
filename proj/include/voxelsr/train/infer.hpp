#pragma once

#include <cstdint>
#include <span>
#include <string>

#include "voxelsr/models/network.hpp"
#include "voxelsr/volume.hpp"

namespace voxelsr::train {

// (N, 1, D, H, W) batch holding the volumes in order. All shapes must match.
template <typename T>
[[nodiscard]] ad::Tensor<T> to_batch(std::span<const Volume> volumes);

// Item `item` of an (N, 1, D, H, W) tensor, with metadata copied from `like`.
template <typename T>
[[nodiscard]] Volume item_volume(const ad::Tensor<T>& batch, std::int64_t item, const Volume& like);

struct InferOptions {
    Extent3 patch{32, 32, 32};
    int margin = 3;
    int batch = 1;  // patches per forward pass
};

struct InferReport {
    std::size_t patches = 0;
    double seconds = 0;
    double voxels_per_second = 0;
    models::NormUse norm = models::NormUse::eval;
    std::string grid_json;
};

// Batch norm uses running statistics when every layer has them and falls back
// to per-forward batch statistics otherwise (that fallback makes the output
// depend on the patch grouping).
[[nodiscard]] models::NormUse inference_norm(const models::GeneratorConfig& cfg, bool stats_populated);

// Non-overlapping patch inference: plan_grid, one generator forward per group
// of patches, merge. Throws VolumeError when the patch exceeds the volume.
template <typename T>
[[nodiscard]] Volume super_resolve(const models::ModelParams<T>& generator, const Volume& lr, const InferOptions& opt,
                                   InferReport* report = nullptr);

}  // namespace voxelsr::train
