#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "manifest.hpp"

namespace voxelsr::cli {

// State shared by the verb that runs; main writes the manifest afterwards.
struct Run {
    Manifest manifest;
    std::optional<std::filesystem::path> out;
    std::function<void()> action;  // set when a verb parsed
};

// Each adds its subcommand to `app`; parsing it sets run.action.
void add_degrade(CLI::App& app, Run& run);
void add_train(CLI::App& app, Run& run);
void add_infer(CLI::App& app, Run& run);
void add_evaluate(CLI::App& app, Run& run);
void add_summarize(CLI::App& app, Run& run);
void add_gradcheck(CLI::App& app, Run& run);
void add_split(CLI::App& app, Run& run);

}  // namespace voxelsr::cli
