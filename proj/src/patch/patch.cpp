#include "voxelsr/patch/patch.hpp"

#include <random>
#include <string>

#include "json.hpp"

namespace voxelsr::patch {

AxisPlan plan_axis(std::int64_t volume, std::int64_t patch, int margin) {
    if (margin < 0) throw VolumeError("patch margin must be non-negative, got " + std::to_string(margin));
    if (patch < 1 || patch > volume) {
        throw VolumeError("patch extent " + std::to_string(patch) + " must lie in [1, " + std::to_string(volume) + "]");
    }
    if (2 * static_cast<std::int64_t>(margin) >= patch) {
        throw VolumeError("margin " + std::to_string(margin) + " leaves no interior in a patch of extent " +
                          std::to_string(patch));
    }
    const std::int64_t stride = patch - 2 * margin;
    AxisPlan a;
    std::int64_t o = 0;
    a.origins.push_back(0);
    while (o + patch < volume) {
        o = std::min(o + stride, volume - patch);
        a.origins.push_back(o);
    }
    std::int64_t begin = 0;
    for (std::size_t i = 0; i < a.origins.size(); ++i) {
        const std::int64_t end = i + 1 == a.origins.size() ? volume : a.origins[i] + patch - margin;
        a.windows.push_back({begin, end});
        begin = end;
    }
    return a;
}

PatchGrid plan_grid(const Extent3& volume_shape, const Extent3& patch_shape, int margin) {
    PatchGrid g;
    g.volume_shape = volume_shape;
    g.patch_shape = patch_shape;
    g.margin = margin;
    for (std::size_t a = 0; a < 3; ++a) {
        try {
            g.axes[a] = plan_axis(volume_shape[a], patch_shape[a], margin);
        } catch (const VolumeError& e) {
            throw VolumeError("axis " + std::to_string(a) + ": " + e.what() + " (volume " + extent_str(volume_shape) +
                              ", patch " + extent_str(patch_shape) + ")");
        }
    }
    return g;
}

std::size_t PatchGrid::count() const noexcept {
    return axes[0].origins.size() * axes[1].origins.size() * axes[2].origins.size();
}

Box PatchGrid::box(std::size_t i) const {
    if (i >= count()) throw std::out_of_range("patch index " + std::to_string(i) + " out of range");
    const std::size_t nw = axes[2].origins.size();
    const std::size_t nh = axes[1].origins.size();
    const std::array<std::size_t, 3> k{i / (nh * nw), (i / nw) % nh, i % nw};
    Box b;
    for (std::size_t a = 0; a < 3; ++a) {
        b.origin[a] = axes[a].origins[k[a]];
        b.window[a] = axes[a].windows[k[a]];
    }
    return b;
}

std::vector<Box> PatchGrid::boxes() const {
    std::vector<Box> out;
    out.reserve(count());
    for (std::size_t i = 0; i < count(); ++i) out.push_back(box(i));
    return out;
}

std::string PatchGrid::to_json() const {
    nlohmann::json j;
    j["volume_shape"] = volume_shape;
    j["patch_shape"] = patch_shape;
    j["margin"] = margin;
    auto& ps = j["patches"] = nlohmann::json::array();
    for (const auto& b : boxes()) {
        nlohmann::json w = nlohmann::json::array();
        for (const auto& s : b.window) w.push_back({s.begin, s.end});
        ps.push_back({{"origin", b.origin}, {"window", w}});
    }
    return j.dump();
}

Volume crop(const Volume& v, const Extent3& origin, const Extent3& shape) {
    for (std::size_t a = 0; a < 3; ++a) {
        if (origin[a] < 0 || shape[a] < 1 || origin[a] + shape[a] > v.shape[a]) {
            throw VolumeError("crop " + extent_str(shape) + " at " + extent_str(origin) + " exceeds volume " +
                              extent_str(v.shape));
        }
    }
    Volume out(shape);
    for (std::int64_t z = 0; z < shape[0]; ++z)
        for (std::int64_t y = 0; y < shape[1]; ++y) {
            const double* src = &v.data[v.index(origin[0] + z, origin[1] + y, origin[2])];
            std::copy(src, src + shape[2], &out.data[out.index(z, y, 0)]);
        }
    out.voxel_size = v.voxel_size;
    out.subject_id = v.subject_id;
    return out;
}

std::vector<Volume> extract(const Volume& v, const PatchGrid& grid) {
    if (v.shape != grid.volume_shape) {
        throw VolumeError("grid planned for " + extent_str(grid.volume_shape) + ", volume is " + extent_str(v.shape));
    }
    std::vector<Volume> out;
    out.reserve(grid.count());
    for (const auto& b : grid.boxes()) out.push_back(crop(v, b.origin, grid.patch_shape));
    return out;
}

Volume merge(const std::vector<Volume>& patches, const PatchGrid& grid) {
    if (patches.size() != grid.count()) {
        throw VolumeError("grid has " + std::to_string(grid.count()) + " patches, got " + std::to_string(patches.size()));
    }
    Volume out(grid.volume_shape);
    for (std::size_t i = 0; i < patches.size(); ++i) {
        const Volume& p = patches[i];
        if (p.shape != grid.patch_shape) {
            throw VolumeError("patch " + std::to_string(i) + " has shape " + extent_str(p.shape) + ", expected " +
                              extent_str(grid.patch_shape));
        }
        const Box b = grid.box(i);
        for (std::int64_t z = b.window[0].begin; z < b.window[0].end; ++z)
            for (std::int64_t y = b.window[1].begin; y < b.window[1].end; ++y) {
                const double* src = &p.data[p.index(z - b.origin[0], y - b.origin[1], b.window[2].begin - b.origin[2])];
                std::copy(src, src + (b.window[2].end - b.window[2].begin), &out.data[out.index(z, y, b.window[2].begin)]);
            }
    }
    if (!patches.empty()) out.voxel_size = patches.front().voxel_size;
    return out;
}

Volume flip(const Volume& p, int axis) {
    if (axis < 0 || axis > 2) throw VolumeError("flip axis must be 0, 1 or 2");
    Volume out = p;
    const auto& s = p.shape;
    for (std::int64_t z = 0; z < s[0]; ++z)
        for (std::int64_t y = 0; y < s[1]; ++y)
            for (std::int64_t x = 0; x < s[2]; ++x) {
                std::int64_t q[3] = {z, y, x};
                q[axis] = s[static_cast<std::size_t>(axis)] - 1 - q[axis];
                out.at(q[0], q[1], q[2]) = p.at(z, y, x);
            }
    return out;
}

unsigned draw_flips(std::uint64_t seed, unsigned enabled) {
    std::mt19937_64 rng(seed);
    unsigned mask = 0;
    for (unsigned a = 0; a < 3; ++a) {
        const bool coin = (rng() >> 63) != 0;
        if ((enabled & (1u << a)) && coin) mask |= 1u << a;
    }
    return mask;
}

Volume augment(const Volume& p, std::uint64_t seed, unsigned enabled, unsigned* applied) {
    const unsigned mask = draw_flips(seed, enabled);
    if (applied) *applied = mask;
    Volume out = p;
    for (int a = 0; a < 3; ++a) {
        if (mask & (1u << a)) out = flip(out, a);
    }
    return out;
}

}  // namespace voxelsr::patch
