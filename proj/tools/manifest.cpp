#include "manifest.hpp"

#include <zlib.h>

#include <algorithm>
#include <cstdio>
#include <fstream>

#include "version.hpp"

namespace voxelsr::cli {

namespace fs = std::filesystem;
using nlohmann::json;

FileHash hash_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw UsageError("cannot read " + path.string());
    uLong crc = ::crc32(0L, Z_NULL, 0);
    std::vector<char> buf(1 << 16);
    std::uintmax_t total = 0;
    while (in) {
        in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
        const auto got = in.gcount();
        if (got <= 0) break;
        crc = ::crc32(crc, reinterpret_cast<const Bytef*>(buf.data()), static_cast<uInt>(got));
        total += static_cast<std::uintmax_t>(got);
    }
    char hex[9];
    std::snprintf(hex, sizeof hex, "%08lx", static_cast<unsigned long>(crc));
    return {path.string(), hex, total};
}

void Manifest::add_input(const fs::path& path) {
    if (fs::is_directory(path)) {
        std::vector<fs::path> files;
        for (const auto& e : fs::recursive_directory_iterator(path)) {
            if (e.is_regular_file()) files.push_back(e.path());
        }
        std::sort(files.begin(), files.end());
        for (const auto& f : files) inputs.push_back(hash_file(f));
    } else {
        inputs.push_back(hash_file(path));
    }
}

void Manifest::add_artifact(const fs::path& out_dir, const fs::path& file, bool is_volatile) {
    auto h = hash_file(file);
    h.path = fs::relative(file, out_dir).generic_string();
    if (is_volatile) volatile_artifacts.push_back(h.path);
    artifacts.push_back(std::move(h));
}

namespace {

json hashes_json(const std::vector<FileHash>& v) {
    json a = json::array();
    for (const auto& h : v) a.push_back({{"path", h.path}, {"crc32", h.crc32}, {"bytes", h.bytes}});
    return a;
}

std::vector<FileHash> hashes_from(const json& a) {
    std::vector<FileHash> out;
    for (const auto& h : a) {
        out.push_back({h.at("path").get<std::string>(), h.at("crc32").get<std::string>(),
                       h.at("bytes").get<std::uintmax_t>()});
    }
    return out;
}

}  // namespace

json Manifest::to_json() const {
    json j;
    j["tool"] = "voxelsr";
    j["version"] = voxelsr::cli::version;
    j["command"] = command;
    j["argv"] = argv;
    j["cwd"] = cwd;
    j["config"] = config;
    j["seed"] = seed ? json(*seed) : json(nullptr);
    j["threads"] = threads;
    j["inputs"] = hashes_json(inputs);
    j["artifacts"] = hashes_json(artifacts);
    j["volatile_artifacts"] = volatile_artifacts;
    j["throughput"] = throughput;
    j["wall_seconds"] = wall_seconds;
    j["status"] = status;
    if (!error.empty()) j["error"] = error;
    return j;
}

Manifest Manifest::from_json(const json& j) {
    Manifest m;
    m.command = j.at("command").get<std::string>();
    m.argv = j.at("argv").get<std::vector<std::string>>();
    m.cwd = j.value("cwd", std::string());
    m.config = j.value("config", json::object());
    if (j.contains("seed") && !j["seed"].is_null()) m.seed = j["seed"].get<std::uint64_t>();
    m.threads = j.value("threads", 1);
    m.inputs = hashes_from(j.value("inputs", json::array()));
    m.artifacts = hashes_from(j.value("artifacts", json::array()));
    m.volatile_artifacts = j.value("volatile_artifacts", std::vector<std::string>{});
    m.throughput = j.value("throughput", json::object());
    m.wall_seconds = j.value("wall_seconds", 0.0);
    m.status = j.value("status", std::string("ok"));
    m.error = j.value("error", std::string());
    return m;
}

void Manifest::write(const fs::path& out_dir) const {
    fs::create_directories(out_dir);
    std::ofstream out(out_dir / "manifest.json");
    out << to_json().dump(2) << '\n';
    if (!out) throw UsageError("cannot write " + (out_dir / "manifest.json").string());
}

Manifest Manifest::read(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot read manifest " + path.string());
    try {
        return from_json(json::parse(in));
    } catch (const json::exception& e) {
        throw UsageError("manifest " + path.string() + " is malformed: " + e.what());
    }
}

}  // namespace voxelsr::cli
