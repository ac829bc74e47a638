#include "voxelsr/models/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <span>
#include <string_view>

namespace voxelsr::models {

namespace {

constexpr std::string_view magic = "VXSRCKPT";
enum : std::uint8_t { record_param = 0, record_stats = 1 };

template <typename U>
using uint_of = std::conditional_t<sizeof(U) == 1, std::uint8_t,
                std::conditional_t<sizeof(U) == 4, std::uint32_t, std::uint64_t>>;

class Writer {
public:
    template <typename U>
    void put(U v) {
        const auto bits = std::bit_cast<uint_of<U>>(v);
        for (std::size_t i = 0; i < sizeof(U); ++i) bytes_.push_back(static_cast<char>((bits >> (8 * i)) & 0xffu));
    }
    void put_string(std::string_view s) {
        put(static_cast<std::uint32_t>(s.size()));
        bytes_.append(s);
    }
    template <typename T>
    void put_values(std::span<const T> v) {
        for (T e : v) put(e);
    }
    std::string& bytes() { return bytes_; }

private:
    std::string bytes_;
};

class Reader {
public:
    Reader(std::string_view data, const std::filesystem::path& path) : data_(data), path_(path) {}

    template <typename U>
    U get() {
        need(sizeof(U));
        uint_of<U> bits = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i) {
            bits |= static_cast<uint_of<U>>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
        }
        pos_ += sizeof(U);
        return std::bit_cast<U>(bits);
    }
    std::string get_string() {
        const auto n = get<std::uint32_t>();
        need(n);
        std::string s(data_.substr(pos_, n));
        pos_ += n;
        return s;
    }
    template <typename T>
    std::vector<T> get_values(std::int64_t n, int width) {
        if (n < 0) fail("negative element count");
        need(static_cast<std::size_t>(n) * static_cast<std::size_t>(width));
        std::vector<T> out(static_cast<std::size_t>(n));
        for (auto& e : out) e = width == 4 ? static_cast<T>(get<float>()) : static_cast<T>(get<double>());
        return out;
    }
    [[nodiscard]] std::size_t pos() const { return pos_; }
    [[nodiscard]] std::string_view since(std::size_t start) const { return data_.substr(start, pos_ - start); }
    [[nodiscard]] bool done() const { return pos_ == data_.size(); }

    [[noreturn]] void fail(const std::string& why) const {
        throw CheckpointError("checkpoint " + path_.string() + ": " + why);
    }

private:
    void need(std::size_t n) const {
        if (data_.size() - pos_ < n) fail("truncated file");
    }

    std::string_view data_;
    const std::filesystem::path& path_;
    std::size_t pos_ = 0;
};

std::uint32_t crc(std::string_view bytes) {
    return static_cast<std::uint32_t>(
        ::crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size())));
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
    return std::string(std::istreambuf_iterator<char>(in), {});
}

CheckpointInfo read_header(Reader& r) {
    for (char c : magic) {
        if (r.get<char>() != c) r.fail("not a voxelsr checkpoint (bad magic)");
    }
    CheckpointInfo info;
    info.version = r.get<std::uint32_t>();
    if (info.version != checkpoint_version) r.fail("unsupported version " + std::to_string(info.version));
    info.config = r.get_string();
    info.value_width = r.get<std::uint8_t>();
    if (info.value_width != 4 && info.value_width != 8) r.fail("bad value width");
    info.step = r.get<std::int64_t>();
    return info;
}

ModelConfig parse_config(const std::string& text) {
    if (text.starts_with("critic")) return parse_discriminator(text);
    return parse_generator(text);
}

template <typename T>
ModelParams<T> build_layout(const ModelConfig& cfg) {
    if (const auto* g = std::get_if<GeneratorConfig>(&cfg)) return build_generator<T>(*g, 0);
    return build_discriminator<T>(std::get<DiscriminatorConfig>(cfg), 0);
}

}  // namespace

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ModelParams<T>& params, std::int64_t step) {
    Writer w;
    w.bytes().append(magic);
    w.put(checkpoint_version);
    w.put_string(std::visit([](const auto& c) { return render(c); }, params.config()));
    w.put(static_cast<std::uint8_t>(sizeof(T)));
    w.put(step);
    w.put(static_cast<std::uint32_t>(params.size() + params.norm_stats().size()));
    auto seal = [&](std::size_t start) { w.put(crc(std::string_view(w.bytes()).substr(start))); };
    for (const auto& e : params.entries()) {
        const std::size_t start = w.bytes().size();
        w.put(std::uint8_t{record_param});
        w.put_string(e.name);
        const auto& dims = e.value.shape().dims();
        w.put(static_cast<std::uint32_t>(dims.size()));
        for (auto d : dims) w.put(d);
        w.put_values(e.value.values());
        seal(start);
    }
    for (const auto& [name, s] : params.norm_stats()) {
        const std::size_t start = w.bytes().size();
        w.put(std::uint8_t{record_stats});
        w.put_string(name);
        w.put(s.mean.numel());
        w.put_values(s.mean.values());
        w.put_values(s.var.values());
        w.put(s.batches_tracked);
        w.put(s.momentum);
        seal(start);
    }
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(w.bytes().data(), static_cast<std::streamsize>(w.bytes().size()));
    if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
}

CheckpointInfo read_checkpoint_info(const std::filesystem::path& path) {
    const std::string data = read_file(path);
    Reader r(data, path);
    return read_header(r);
}

template <typename T>
ModelParams<T> load_checkpoint(const std::filesystem::path& path, CheckpointInfo* info_out) {
    const std::string data = read_file(path);
    Reader r(data, path);
    const CheckpointInfo info = read_header(r);
    ModelConfig cfg;
    try {
        cfg = parse_config(info.config);
    } catch (const ConfigError& e) {
        r.fail(e.what());
    }
    const ModelParams<T> layout = build_layout<T>(cfg);
    ModelParams<T> out(cfg);
    const auto records = r.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < records; ++i) {
        const std::size_t start = r.pos();
        const auto kind = r.get<std::uint8_t>();
        const std::string name = r.get_string();
        if (kind == record_param) {
            const auto rank = r.get<std::uint32_t>();
            if (rank > 8) r.fail("tensor '" + name + "' has implausible rank");
            std::vector<std::int64_t> dims(rank);
            for (auto& d : dims) d = r.get<std::int64_t>();
            ad::Shape shape;
            try {
                shape = ad::Shape(dims);
            } catch (const ad::ShapeError& e) {
                r.fail("tensor '" + name + "': " + e.what());
            }
            auto values = r.get_values<T>(shape.numel(), info.value_width);
            const auto body = r.since(start);
            if (r.get<std::uint32_t>() != crc(body)) r.fail("checksum mismatch in tensor '" + name + "'");
            try {
                if (!(layout.at(name).shape() == shape)) r.fail("tensor '" + name + "' has unexpected shape");
            } catch (const std::out_of_range&) {
                r.fail("unexpected tensor '" + name + "' for config " + info.config);
            }
            out.add(name, ad::Tensor<T>(shape, std::move(values)));
        } else if (kind == record_stats) {
            const auto channels = r.get<std::int64_t>();
            auto mean = r.get_values<T>(channels, info.value_width);
            auto var = r.get_values<T>(channels, info.value_width);
            const auto tracked = r.get<std::int64_t>();
            const auto momentum = r.get<double>();
            const auto body = r.since(start);
            if (r.get<std::uint32_t>() != crc(body)) r.fail("checksum mismatch in statistics '" + name + "'");
            auto it = layout.norm_stats().find(name);
            if (it == layout.norm_stats().end() || it->second.mean.numel() != channels) {
                r.fail("unexpected statistics record '" + name + "'");
            }
            out.norm_stats()[name] = ad::RunningStats<T>{ad::Tensor<T>(ad::Shape{channels}, std::move(mean)),
                                                         ad::Tensor<T>(ad::Shape{channels}, std::move(var)), tracked,
                                                         momentum};
        } else {
            r.fail("unknown record kind " + std::to_string(kind));
        }
    }
    if (!r.done()) r.fail("trailing bytes after last record");
    if (out.size() != layout.size() || out.norm_stats().size() != layout.norm_stats().size()) {
        r.fail("missing tensors for config " + info.config);
    }
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (out.entries()[i].name != layout.entries()[i].name) r.fail("tensors stored out of order");
    }
    if (info_out) *info_out = info;
    return out;
}

template void save_checkpoint<float>(const std::filesystem::path&, const ModelParams<float>&, std::int64_t);
template void save_checkpoint<double>(const std::filesystem::path&, const ModelParams<double>&, std::int64_t);
template ModelParams<float> load_checkpoint<float>(const std::filesystem::path&, CheckpointInfo*);
template ModelParams<double> load_checkpoint<double>(const std::filesystem::path&, CheckpointInfo*);

}  // namespace voxelsr::models
