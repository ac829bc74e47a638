#include "voxelsr/io/nifti.hpp"

#include <cmath>
#include <fstream>
#include <iterator>
#include <vector>

#include "bytes.hpp"

namespace voxelsr::io {

namespace fs = std::filesystem;
using bytes::load;
using bytes::store_le;

namespace {

constexpr std::size_t off_dim = 40, off_datatype = 70, off_bitpix = 72, off_pixdim = 76, off_vox_offset = 108,
                      off_slope = 112, off_inter = 116, off_magic = 344;

std::vector<std::uint8_t> slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw NiftiError(NiftiErrorKind::io, "cannot open " + p.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

int bits_for(std::int16_t datatype) {
    switch (static_cast<NiftiType>(datatype)) {
        case NiftiType::uint8: return 8;
        case NiftiType::int16: return 16;
        case NiftiType::int32: return 32;
        case NiftiType::float32: return 32;
        case NiftiType::float64: return 64;
    }
    return 0;
}

double decode(const std::uint8_t* p, std::int16_t datatype, bool big) {
    switch (static_cast<NiftiType>(datatype)) {
        case NiftiType::uint8: return *p;
        case NiftiType::int16: return load<std::int16_t>(p, big);
        case NiftiType::int32: return load<std::int32_t>(p, big);
        case NiftiType::float32: return load<float>(p, big);
        case NiftiType::float64: return load<double>(p, big);
    }
    return 0.0;
}

Extent3 volume_shape(const NiftiHeader& h) {
    const int rank = h.dim[0];
    if (rank < 3 || rank > 7) {
        throw NiftiError(NiftiErrorKind::dims, "dim[0] = " + std::to_string(rank) + ", need a 3D image");
    }
    for (int i = 4; i <= rank; ++i) {
        if (h.dim[static_cast<std::size_t>(i)] != 1) {
            throw NiftiError(NiftiErrorKind::dims, "dim[" + std::to_string(i) + "] = " +
                                                       std::to_string(h.dim[static_cast<std::size_t>(i)]) +
                                                       "; only singleton axes beyond the third are supported");
        }
    }
    for (int i = 1; i <= 3; ++i) {
        if (h.dim[static_cast<std::size_t>(i)] < 1) {
            throw NiftiError(NiftiErrorKind::dims, "dim[" + std::to_string(i) + "] must be positive");
        }
    }
    return {h.dim[3], h.dim[2], h.dim[1]};
}

}  // namespace

NiftiHeader parse_nifti_header(const std::uint8_t* b, std::size_t size) {
    if (size < nifti_header_size) {
        throw NiftiError(NiftiErrorKind::truncated, "file holds " + std::to_string(size) + " bytes, header needs 348");
    }
    NiftiHeader h;
    const auto le = load<std::int32_t>(b, false);
    const auto be = load<std::int32_t>(b, true);
    if (le == 348) {
        h.big_endian = false;
    } else if (be == 348) {
        h.big_endian = true;
    } else {
        throw NiftiError(NiftiErrorKind::header_size,
                         "sizeof_hdr is " + std::to_string(le) + " (" + std::to_string(be) + " swapped), expected 348");
    }
    const bool big = h.big_endian;
    h.sizeof_hdr = 348;
    for (std::size_t i = 0; i < 8; ++i) {
        h.dim[i] = load<std::int16_t>(b + off_dim + 2 * i, big);
        h.pixdim[i] = load<float>(b + off_pixdim + 4 * i, big);
    }
    h.datatype = load<std::int16_t>(b + off_datatype, big);
    h.bitpix = load<std::int16_t>(b + off_bitpix, big);
    h.vox_offset = load<float>(b + off_vox_offset, big);
    h.scl_slope = load<float>(b + off_slope, big);
    h.scl_inter = load<float>(b + off_inter, big);
    std::copy(b + off_magic, b + off_magic + 4, h.magic.begin());
    std::copy(b, b + nifti_header_size, h.raw.begin());

    const std::string magic(h.magic.data(), 3);
    if ((magic != "n+1" && magic != "ni1") || h.magic[3] != '\0') {
        throw NiftiError(NiftiErrorKind::magic, "magic is not \"n+1\" or \"ni1\"");
    }
    const int bits = bits_for(h.datatype);
    if (bits == 0) throw NiftiError(NiftiErrorKind::datatype, "unsupported datatype code " + std::to_string(h.datatype));
    if (h.bitpix != bits) {
        throw NiftiError(NiftiErrorKind::datatype, "bitpix " + std::to_string(h.bitpix) + " does not match datatype " +
                                                       std::to_string(h.datatype));
    }
    (void)volume_shape(h);
    if (!std::isfinite(h.vox_offset) || h.vox_offset < 0.0f || h.vox_offset > 1e9f) {
        throw NiftiError(NiftiErrorKind::offset, "vox_offset is not a usable byte offset");
    }
    if (magic == "n+1" && h.vox_offset < 348.0f) {
        throw NiftiError(NiftiErrorKind::offset, "vox_offset points inside the header");
    }
    return h;
}

NiftiImage read_nifti(const fs::path& path) {
    const auto file = slurp(path);
    NiftiImage img;
    img.header = parse_nifti_header(file.data(), file.size());
    const NiftiHeader& h = img.header;
    const Extent3 shape = volume_shape(h);

    const std::vector<std::uint8_t>* payload = &file;
    std::vector<std::uint8_t> detached;
    if (h.magic[1] == 'i') {
        fs::path img_path = path;
        img_path.replace_extension(".img");
        detached = slurp(img_path);
        payload = &detached;
    }
    const auto offset = static_cast<std::size_t>(h.vox_offset);
    const auto width = static_cast<std::size_t>(h.bitpix / 8);
    const std::uint64_t count = static_cast<std::uint64_t>(shape[0]) * static_cast<std::uint64_t>(shape[1]) *
                                static_cast<std::uint64_t>(shape[2]);
    if (payload->size() < offset || (payload->size() - offset) / width < count) {
        throw NiftiError(NiftiErrorKind::truncated, "payload needs " + std::to_string(count * width) +
                                                        " bytes after offset " + std::to_string(offset) + ", file has " +
                                                        std::to_string(payload->size()));
    }
    std::vector<double> values(count);
    const bool scale = h.scl_slope != 0.0f && std::isfinite(h.scl_slope);
    const double slope = h.scl_slope, inter = std::isfinite(h.scl_inter) ? h.scl_inter : 0.0f;
    const std::uint8_t* p = payload->data() + offset;
    for (std::uint64_t i = 0; i < count; ++i, p += width) {
        const double v = decode(p, h.datatype, h.big_endian);
        values[i] = scale ? v * slope + inter : v;
    }
    img.volume = Volume(shape, std::move(values));
    if (h.pixdim[1] > 0 && h.pixdim[2] > 0 && h.pixdim[3] > 0) {
        img.volume.voxel_size = std::array<double, 3>{h.pixdim[3], h.pixdim[2], h.pixdim[1]};
    }
    img.volume.subject_id = path.stem().string();
    return img;
}

void write_nifti(const Volume& v, const fs::path& path, const NiftiHeader* header_template) {
    v.validate();
    for (auto d : v.shape) {
        if (d > 32767) throw NiftiError(NiftiErrorKind::dims, "extent " + extent_str(v.shape) + " exceeds NIfTI-1 limits");
    }
    std::vector<std::uint8_t> out(352, 0);
    if (header_template) {
        // The template's raw bytes are in its own byte order; only reuse them when little-endian.
        if (!header_template->big_endian) std::copy(header_template->raw.begin(), header_template->raw.end(), out.begin());
    }
    store_le<std::int32_t>(out.data(), 348);
    const std::int16_t dim[8] = {3, static_cast<std::int16_t>(v.shape[2]), static_cast<std::int16_t>(v.shape[1]),
                                 static_cast<std::int16_t>(v.shape[0]), 1, 1, 1, 1};
    const std::array<double, 3> vs = v.voxel_size.value_or(std::array<double, 3>{1.0, 1.0, 1.0});
    const float pix[8] = {1.0f, static_cast<float>(vs[2]), static_cast<float>(vs[1]), static_cast<float>(vs[0]),
                          1.0f, 1.0f, 1.0f, 1.0f};
    for (std::size_t i = 0; i < 8; ++i) {
        store_le<std::int16_t>(out.data() + off_dim + 2 * i, dim[i]);
        store_le<float>(out.data() + off_pixdim + 4 * i, pix[i]);
    }
    store_le<std::int16_t>(out.data() + off_datatype, static_cast<std::int16_t>(NiftiType::float32));
    store_le<std::int16_t>(out.data() + off_bitpix, 32);
    store_le<float>(out.data() + off_vox_offset, 352.0f);
    store_le<float>(out.data() + off_slope, 1.0f);
    store_le<float>(out.data() + off_inter, 0.0f);
    const char magic[4] = {'n', '+', '1', '\0'};
    std::copy(magic, magic + 4, out.begin() + off_magic);
    std::fill(out.begin() + 348, out.end(), 0);  // no extensions

    out.reserve(352 + v.data.size() * 4);
    for (double x : v.data) bytes::append_le<float>(out, static_cast<float>(x));

    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw NiftiError(NiftiErrorKind::io, "cannot write " + path.string());
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
    if (!f) throw NiftiError(NiftiErrorKind::io, "short write to " + path.string());
}

}  // namespace voxelsr::io
