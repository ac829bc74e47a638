#include "png_panel.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

#include "manifest.hpp"

namespace voxelsr::cli {
namespace {

constexpr std::int64_t gap = 2;

struct Slice {
    std::int64_t rows = 0, cols = 0;
    std::vector<double> values;
};

// axis 0: the (H, W) plane at z; axis 1: (D, W) at y; axis 2: (D, H) at x.
Slice take_slice(const Volume& v, int axis, std::int64_t at) {
    Slice s;
    const auto [d, h, w] = v.shape;
    if (axis == 0) {
        s.rows = h, s.cols = w;
        for (std::int64_t y = 0; y < h; ++y)
            for (std::int64_t x = 0; x < w; ++x) s.values.push_back(v.at(at, y, x));
    } else if (axis == 1) {
        s.rows = d, s.cols = w;
        for (std::int64_t z = 0; z < d; ++z)
            for (std::int64_t x = 0; x < w; ++x) s.values.push_back(v.at(z, at, x));
    } else {
        s.rows = d, s.cols = h;
        for (std::int64_t z = 0; z < d; ++z)
            for (std::int64_t y = 0; y < h; ++y) s.values.push_back(v.at(z, y, at));
    }
    return s;
}

void write_gray_png(const std::filesystem::path& path, std::int64_t width, std::int64_t height,
                    const std::vector<png_byte>& pixels) {
    std::unique_ptr<FILE, int (*)(FILE*)> file(std::fopen(path.string().c_str(), "wb"), &std::fclose);
    if (!file) throw UsageError("cannot write " + path.string());
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw UsageError("libpng initialization failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw UsageError("libpng failed writing " + path.string());
    }
    png_init_io(png, file.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, PNG_COLOR_TYPE_GRAY,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (std::int64_t r = 0; r < height; ++r) {
        png_write_row(png, pixels.data() + r * width);
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

}  // namespace

void write_slice_panel(const std::filesystem::path& path, const std::vector<const Volume*>& columns,
                       const Extent3& center, double lo, double hi) {
    if (columns.empty()) throw UsageError("slice panel needs at least one volume");
    const Extent3 shape = columns.front()->shape;
    for (const auto* v : columns) {
        if (v->shape != shape) throw UsageError("slice panel volumes differ in shape");
    }
    for (int a = 0; a < 3; ++a) {
        if (center[a] < 0 || center[a] >= shape[a]) throw UsageError("slice index outside the volume");
    }
    const std::int64_t tile_w = std::max({shape[1], shape[2]}), tile_h = std::max({shape[0], shape[1]});
    const auto n = static_cast<std::int64_t>(columns.size());
    const std::int64_t width = n * tile_w + (n - 1) * gap, height = 3 * tile_h + 2 * gap;
    std::vector<png_byte> pixels(static_cast<std::size_t>(width * height), 0);
    const double scale = hi > lo ? 255.0 / (hi - lo) : 0.0;
    for (int axis = 0; axis < 3; ++axis) {
        for (std::int64_t c = 0; c < n; ++c) {
            const Slice s = take_slice(*columns[static_cast<std::size_t>(c)], axis, center[axis]);
            const std::int64_t y0 = axis * (tile_h + gap), x0 = c * (tile_w + gap);
            for (std::int64_t r = 0; r < s.rows; ++r) {
                for (std::int64_t q = 0; q < s.cols; ++q) {
                    const double g = std::clamp((s.values[static_cast<std::size_t>(r * s.cols + q)] - lo) * scale, 0.0, 255.0);
                    pixels[static_cast<std::size_t>((y0 + r) * width + x0 + q)] = static_cast<png_byte>(std::lround(g));
                }
            }
        }
    }
    write_gray_png(path, width, height, pixels);
}

}  // namespace voxelsr::cli
