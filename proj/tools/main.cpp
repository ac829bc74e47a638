#include <chrono>
#include <filesystem>
#include <iostream>
#include <map>

#include "CLI11.hpp"
#include "commands.hpp"
#include "version.hpp"
#include "voxelsr/autodiff/tensor.hpp"
#include "voxelsr/autodiff/threads.hpp"
#include "voxelsr/io/nifti.hpp"
#include "voxelsr/io/raw.hpp"
#include "voxelsr/models/checkpoint.hpp"
#include "voxelsr/models/config.hpp"
#include "voxelsr/train/trainer.hpp"

namespace fs = std::filesystem;
using namespace voxelsr;
using namespace voxelsr::cli;

namespace {

constexpr int exit_internal = 1;
constexpr int exit_usage = 2;
constexpr int exit_numerical = 3;

int run_cli(const std::vector<std::string>& args);

// Exit code for an exception escaping a verb.
int classify(const std::exception_ptr& error, std::string& message) {
    try {
        std::rethrow_exception(error);
    } catch (const train::NumericalError& e) {
        message = std::string(e.what()) + " (diagnostic checkpoint " + e.checkpoint().string() + ")";
        return exit_numerical;
    } catch (const CheckFailure& e) {
        message = e.what();
        return exit_numerical;
    } catch (const ad::DomainError& e) {
        message = e.what();
        return exit_numerical;
    } catch (const UsageError& e) {
        message = e.what();
    } catch (const VolumeError& e) {
        message = e.what();
    } catch (const io::NiftiError& e) {
        message = e.what();
    } catch (const io::RawError& e) {
        message = e.what();
    } catch (const models::ConfigError& e) {
        message = e.what();
    } catch (const models::CheckpointError& e) {
        message = e.what();
    } catch (const train::TrainError& e) {
        message = e.what();
    } catch (const ad::ShapeError& e) {
        message = e.what();
    } catch (const fs::filesystem_error& e) {
        message = e.what();
    } catch (const nlohmann::json::exception& e) {
        message = e.what();
    } catch (const std::invalid_argument& e) {
        message = e.what();
    } catch (const std::exception& e) {
        message = std::string("internal error: ") + e.what();
        return exit_internal;
    }
    return exit_usage;
}

std::vector<std::string> with_out(std::vector<std::string> argv, const std::string& out) {
    for (std::size_t i = 0; i < argv.size(); ++i) {
        if (argv[i] == "--out" && i + 1 < argv.size()) {
            argv[i + 1] = out;
            return argv;
        }
        if (argv[i].rfind("--out=", 0) == 0) {
            argv[i] = "--out=" + out;
            return argv;
        }
    }
    argv.push_back("--out");
    argv.push_back(out);
    return argv;
}

// Re-runs a recorded command into a fresh directory after checking the
// inputs, then compares every non-volatile artifact.
int replay(const fs::path& manifest_path, const std::string& out) {
    if (out.empty()) throw UsageError("--replay needs --out <new output directory>");
    const Manifest recorded = Manifest::read(manifest_path);
    const fs::path target = fs::absolute(out);
    const fs::path base = recorded.cwd.empty() ? fs::current_path() : fs::path(recorded.cwd);
    if (fs::exists(target / "manifest.json") &&
        fs::equivalent(target / "manifest.json", fs::absolute(manifest_path))) {
        throw UsageError("--out must differ from the recorded output directory");
    }
    std::vector<std::string> drift;
    for (const auto& in : recorded.inputs) {
        fs::path p(in.path);
        if (p.is_relative()) p = base / p;
        if (!fs::exists(p)) {
            drift.push_back(in.path + " is missing");
        } else if (hash_file(p).crc32 != in.crc32) {
            drift.push_back(in.path + " changed");
        }
    }
    if (!drift.empty()) {
        std::string msg = "inputs differ from the manifest:";
        for (const auto& d : drift) msg += "\n  " + d;
        throw UsageError(msg);
    }

    const fs::path here = fs::current_path();
    if (fs::is_directory(base)) fs::current_path(base);
    const int code = run_cli(with_out(recorded.argv, target.string()));
    fs::current_path(here);
    if (code != 0) return code;

    const Manifest fresh = Manifest::read(target / "manifest.json");
    std::map<std::string, std::string> now;
    for (const auto& a : fresh.artifacts) now[a.path] = a.crc32;
    std::size_t same = 0, skipped = 0;
    std::vector<std::string> differ;
    for (const auto& a : recorded.artifacts) {
        if (std::find(recorded.volatile_artifacts.begin(), recorded.volatile_artifacts.end(), a.path) !=
            recorded.volatile_artifacts.end()) {
            ++skipped;
            continue;
        }
        const auto it = now.find(a.path);
        if (it == now.end()) {
            differ.push_back(a.path + " was not produced");
        } else if (it->second != a.crc32) {
            differ.push_back(a.path + " differs (" + a.crc32 + " -> " + it->second + ")");
        } else {
            ++same;
        }
    }
    std::cout << "replay: " << same << " artifact(s) identical, " << differ.size() << " differ, " << skipped
              << " volatile skipped\n";
    for (const auto& d : differ) std::cout << "  " << d << '\n';
    if (!differ.empty()) throw CheckFailure("replay did not reproduce the recorded artifacts");
    return 0;
}

int run_cli(const std::vector<std::string>& args) {
    CLI::App app{"3D MRI super-resolution with densely connected networks"};
    app.name("voxelsr");
    app.set_version_flag("--version", std::string(version));
    app.require_subcommand(0, 1);
    std::string replay_manifest, replay_out;
    app.add_option("--replay", replay_manifest, "Re-run the command recorded in manifest.json and compare artifacts");
    app.add_option("--out", replay_out, "Output directory for --replay");
    Run run;
    add_degrade(app, run);
    add_train(app, run);
    add_infer(app, run);
    add_evaluate(app, run);
    add_summarize(app, run);
    add_gradcheck(app, run);
    add_split(app, run);

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return exit_usage;
    }

    if (!replay_manifest.empty()) {
        if (run.action) {
            std::cerr << "error: --replay takes no command\n";
            return exit_usage;
        }
        try {
            return replay(replay_manifest, replay_out);
        } catch (...) {
            std::string message;
            const int code = classify(std::current_exception(), message);
            std::cerr << "error: " << message << '\n';
            return code;
        }
    }
    if (!run.action) {
        std::cerr << app.help();
        return exit_usage;
    }

    run.manifest.command = app.get_subcommands().front()->get_name();
    run.manifest.argv = args;
    run.manifest.cwd = fs::current_path().string();
    run.manifest.threads = configure_threads();
    const auto start = std::chrono::steady_clock::now();
    int code = 0;
    try {
        run.action();
    } catch (...) {
        std::string message;
        code = classify(std::current_exception(), message);
        std::cerr << "error: " << message << '\n';
        run.manifest.status = "failed";
        run.manifest.error = message;
    }
    run.manifest.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (run.out && (code == 0 || fs::is_directory(*run.out))) {
        try {
            run.manifest.write(*run.out);
        } catch (const std::exception& e) {
            std::cerr << "error: " << e.what() << '\n';
            if (code == 0) code = exit_usage;
        }
    }
    return code;
}

}  // namespace

int main(int argc, char** argv) { return run_cli(std::vector<std::string>(argv + 1, argv + argc)); }
