#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace voxelsr {

using Extent3 = std::array<std::int64_t, 3>;

class VolumeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Scalar field on a (D, H, W) grid, W fastest. Values are held in 64 bits
// regardless of the on-disk precision.
struct Volume {
    Extent3 shape{1, 1, 1};
    std::vector<double> data = std::vector<double>(1, 0.0);
    std::optional<std::array<double, 3>> voxel_size;  // mm per axis
    std::string subject_id;

    Volume() = default;
    explicit Volume(Extent3 s, double fill = 0.0);
    Volume(Extent3 s, std::vector<double> values);

    [[nodiscard]] std::int64_t size() const noexcept { return shape[0] * shape[1] * shape[2]; }
    [[nodiscard]] std::size_t index(std::int64_t z, std::int64_t y, std::int64_t x) const noexcept {
        return static_cast<std::size_t>((z * shape[1] + y) * shape[2] + x);
    }
    [[nodiscard]] double& at(std::int64_t z, std::int64_t y, std::int64_t x) noexcept { return data[index(z, y, x)]; }
    [[nodiscard]] double at(std::int64_t z, std::int64_t y, std::int64_t x) const noexcept {
        return data[index(z, y, x)];
    }

    // Throws VolumeError for non-positive extents, a size mismatch or non-finite values.
    void validate() const;
    [[nodiscard]] double min() const;
    [[nodiscard]] double max() const;
    // Same metadata, new values.
    [[nodiscard]] Volume with_data(std::vector<double> values) const;
};

[[nodiscard]] std::string extent_str(const Extent3& e);

}  // namespace voxelsr
