#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "voxelsr/volume.hpp"

namespace voxelsr::patch {

// Half-open voxel range along one axis.
struct Span {
    std::int64_t begin = 0;
    std::int64_t end = 0;
    bool operator==(const Span&) const = default;
};

struct AxisPlan {
    std::vector<std::int64_t> origins;
    std::vector<Span> windows;  // contribution of each origin, in volume coordinates
};

struct Box {
    Extent3 origin{};
    std::array<Span, 3> window{};  // volume coordinates
};

// Patches are enumerated D-major: the W origin varies fastest.
struct PatchGrid {
    Extent3 volume_shape{};
    Extent3 patch_shape{};
    int margin = 3;
    std::array<AxisPlan, 3> axes;

    [[nodiscard]] std::size_t count() const noexcept;
    [[nodiscard]] Box box(std::size_t i) const;
    [[nodiscard]] std::vector<Box> boxes() const;
    [[nodiscard]] std::string to_json() const;
};

// Stride patch - 2*margin; the last origin on each axis is pulled back so the
// patch ends at the volume edge. Windows chain: each starts where the previous
// ended, interior ends are origin + patch - margin, the last ends at the edge.
[[nodiscard]] PatchGrid plan_grid(const Extent3& volume_shape, const Extent3& patch_shape, int margin = 3);
[[nodiscard]] AxisPlan plan_axis(std::int64_t volume, std::int64_t patch, int margin);

[[nodiscard]] Volume crop(const Volume& v, const Extent3& origin, const Extent3& shape);
[[nodiscard]] std::vector<Volume> extract(const Volume& v, const PatchGrid& grid);
[[nodiscard]] Volume merge(const std::vector<Volume>& patches, const PatchGrid& grid);

enum FlipOps : unsigned { flip_none = 0, flip_d = 1, flip_h = 2, flip_w = 4, flip_all = 7 };

[[nodiscard]] Volume flip(const Volume& p, int axis);
// Flips each enabled axis with probability 1/2, decided by a generator seeded
// with seed. Returns the mask of flips applied through `applied` when given.
[[nodiscard]] Volume augment(const Volume& p, std::uint64_t seed, unsigned enabled = flip_all, unsigned* applied = nullptr);
[[nodiscard]] unsigned draw_flips(std::uint64_t seed, unsigned enabled);

}  // namespace voxelsr::patch
