#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

namespace voxelsr::cli {

// Bad arguments or inputs: exit code 2.
class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// A result that is wrong rather than unreadable (failed check, replay drift): exit code 3.
class CheckFailure : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct FileHash {
    std::string path;
    std::string crc32;  // 8 lowercase hex digits
    std::uintmax_t bytes = 0;
};

[[nodiscard]] FileHash hash_file(const std::filesystem::path& path);

// One per run, written to {out}/manifest.json.
struct Manifest {
    std::string command;
    std::vector<std::string> argv;  // without the program name
    std::string cwd;                // relative paths in argv resolve against this
    nlohmann::json config = nlohmann::json::object();
    std::optional<std::uint64_t> seed;
    int threads = 1;
    std::vector<FileHash> inputs;
    // Paths relative to the output directory. Volatile artifacts (wall-clock
    // content) are listed but not compared on replay.
    std::vector<FileHash> artifacts;
    std::vector<std::string> volatile_artifacts;
    nlohmann::json throughput = nlohmann::json::object();
    double wall_seconds = 0;
    std::string status = "ok";
    std::string error;

    // Hashes a regular file, or every regular file below a directory.
    void add_input(const std::filesystem::path& path);
    void add_artifact(const std::filesystem::path& out_dir, const std::filesystem::path& file, bool is_volatile = false);

    [[nodiscard]] nlohmann::json to_json() const;
    [[nodiscard]] static Manifest from_json(const nlohmann::json& j);
    void write(const std::filesystem::path& out_dir) const;
    [[nodiscard]] static Manifest read(const std::filesystem::path& path);
};

}  // namespace voxelsr::cli
