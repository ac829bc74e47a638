#include "voxelsr/volume.hpp"

#include <algorithm>
#include <cmath>

namespace voxelsr {

namespace {

void check_extent(const Extent3& s) {
    for (auto d : s) {
        if (d < 1) throw VolumeError("volume extents must be positive, got " + extent_str(s));
    }
}

}  // namespace

Volume::Volume(Extent3 s, double fill) : shape(s) {
    check_extent(s);
    data.assign(static_cast<std::size_t>(size()), fill);
}

Volume::Volume(Extent3 s, std::vector<double> values) : shape(s), data(std::move(values)) {
    check_extent(s);
    if (static_cast<std::int64_t>(data.size()) != size()) {
        throw VolumeError("volume " + extent_str(s) + " needs " + std::to_string(size()) + " values, got " +
                          std::to_string(data.size()));
    }
}

void Volume::validate() const {
    check_extent(shape);
    if (static_cast<std::int64_t>(data.size()) != size()) throw VolumeError("volume data length mismatch");
    for (double v : data) {
        if (!std::isfinite(v)) throw VolumeError("volume contains non-finite values");
    }
}

double Volume::min() const { return *std::min_element(data.begin(), data.end()); }
double Volume::max() const { return *std::max_element(data.begin(), data.end()); }

Volume Volume::with_data(std::vector<double> values) const {
    Volume out(shape, std::move(values));
    out.voxel_size = voxel_size;
    out.subject_id = subject_id;
    return out;
}

std::string extent_str(const Extent3& e) {
    return std::to_string(e[0]) + "x" + std::to_string(e[1]) + "x" + std::to_string(e[2]);
}

}  // namespace voxelsr
