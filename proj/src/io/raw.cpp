#include "voxelsr/io/raw.hpp"

#include <fstream>
#include <iterator>

#include "bytes.hpp"
#include "json.hpp"
#include "voxelsr/io/nifti.hpp"

namespace voxelsr::io {

namespace fs = std::filesystem;

std::size_t byte_width(RawType t) {
    switch (t) {
        case RawType::uint8: return 1;
        case RawType::int16: return 2;
        case RawType::int32: return 4;
        case RawType::float32: return 4;
        case RawType::float64: return 8;
    }
    return 0;
}

std::string to_string(RawType t) {
    switch (t) {
        case RawType::uint8: return "uint8";
        case RawType::int16: return "int16";
        case RawType::int32: return "int32";
        case RawType::float32: return "float32";
        case RawType::float64: return "float64";
    }
    return "?";
}

RawType parse_raw_type(const std::string& s) {
    for (RawType t : {RawType::uint8, RawType::int16, RawType::int32, RawType::float32, RawType::float64}) {
        if (to_string(t) == s) return t;
    }
    throw RawError("unknown raw dtype \"" + s + "\" (uint8, int16, int32, float32, float64)");
}

namespace {

fs::path header_path(const fs::path& p) { return fs::path(p.string() + ".json"); }

}  // namespace

void write_raw(const Volume& v, const fs::path& path, RawType dtype) {
    v.validate();
    std::vector<std::uint8_t> out;
    out.reserve(v.data.size() * byte_width(dtype));
    for (double x : v.data) {
        switch (dtype) {
            case RawType::uint8: out.push_back(static_cast<std::uint8_t>(x)); break;
            case RawType::int16: bytes::append_le(out, static_cast<std::int16_t>(x)); break;
            case RawType::int32: bytes::append_le(out, static_cast<std::int32_t>(x)); break;
            case RawType::float32: bytes::append_le(out, static_cast<float>(x)); break;
            case RawType::float64: bytes::append_le(out, x); break;
        }
    }
    nlohmann::json h;
    h["shape"] = v.shape;
    h["dtype"] = to_string(dtype);
    h["endianness"] = "little";
    h["voxel_size"] = v.voxel_size ? nlohmann::json(*v.voxel_size) : nlohmann::json(nullptr);
    h["subject_id"] = v.subject_id;
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw RawError("cannot write " + path.string());
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
    std::ofstream j(header_path(path), std::ios::trunc);
    if (!j) throw RawError("cannot write " + header_path(path).string());
    j << h.dump(2) << '\n';
    if (!f || !j) throw RawError("short write to " + path.string());
}

Volume read_raw(const fs::path& path) {
    std::ifstream j(header_path(path));
    if (!j) throw RawError("missing raw header " + header_path(path).string());
    Extent3 shape{};
    RawType dtype{};
    bool big = false;
    std::optional<std::array<double, 3>> voxel_size;
    std::string subject;
    try {
        const auto h = nlohmann::json::parse(j);
        shape = h.at("shape").get<Extent3>();
        dtype = parse_raw_type(h.at("dtype").get<std::string>());
        const auto e = h.value("endianness", std::string("little"));
        if (e != "little" && e != "big") throw RawError("endianness must be little or big, got " + e);
        big = e == "big";
        if (h.contains("voxel_size") && !h["voxel_size"].is_null()) voxel_size = h["voxel_size"].get<std::array<double, 3>>();
        subject = h.value("subject_id", path.stem().string());
    } catch (const nlohmann::json::exception& e) {
        throw RawError("bad raw header " + header_path(path).string() + ": " + e.what());
    }
    for (auto d : shape) {
        if (d < 1) throw RawError("raw header shape " + extent_str(shape) + " is not positive");
    }
    std::ifstream f(path, std::ios::binary);
    if (!f) throw RawError("cannot open " + path.string());
    const std::vector<std::uint8_t> payload{std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
    const std::size_t w = byte_width(dtype);
    const auto count = static_cast<std::size_t>(shape[0] * shape[1] * shape[2]);
    if (payload.size() != count * w) {
        throw RawError("payload " + path.string() + " has " + std::to_string(payload.size()) + " bytes, header implies " +
                       std::to_string(count * w));
    }
    std::vector<double> values(count);
    for (std::size_t i = 0; i < count; ++i) {
        const std::uint8_t* p = payload.data() + i * w;
        switch (dtype) {
            case RawType::uint8: values[i] = *p; break;
            case RawType::int16: values[i] = bytes::load<std::int16_t>(p, big); break;
            case RawType::int32: values[i] = bytes::load<std::int32_t>(p, big); break;
            case RawType::float32: values[i] = bytes::load<float>(p, big); break;
            case RawType::float64: values[i] = bytes::load<double>(p, big); break;
        }
    }
    Volume v(shape, std::move(values));
    v.voxel_size = voxel_size;
    v.subject_id = subject;
    return v;
}

Volume read_volume(const fs::path& path) {
    const auto ext = path.extension().string();
    if (ext == ".nii" || ext == ".hdr") return read_nifti(path).volume;
    if (ext == ".vol") return read_raw(path);
    throw RawError("unknown volume extension \"" + ext + "\" for " + path.string() + " (.nii, .hdr, .vol)");
}

void write_volume(const Volume& v, const fs::path& path) {
    const auto ext = path.extension().string();
    if (ext == ".nii") {
        write_nifti(v, path);
    } else if (ext == ".vol") {
        write_raw(v, path);
    } else {
        throw RawError("unknown volume extension \"" + ext + "\" for " + path.string() + " (.nii, .vol)");
    }
}

}  // namespace voxelsr::io
