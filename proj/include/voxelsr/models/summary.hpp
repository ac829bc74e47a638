#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "voxelsr/models/config.hpp"

namespace voxelsr::models {

struct LayerRow {
    int layer = 0;
    std::string name;
    std::string shape;  // weight shape, e.g. "16x32x3x3x3"; "32" for norm layers
    std::int64_t out_channels = 0;
    std::int64_t params = 0;
    std::int64_t macs = 0;  // per output voxel
};

struct ModelSummary {
    std::string title;  // "mDCSRN b2u4"
    std::int64_t parameter_count = 0;
    std::int64_t macs_per_output_voxel = 0;
    std::vector<LayerRow> layers;
};

[[nodiscard]] ModelSummary summarize(const GeneratorConfig& cfg);

// Human-readable table. When `published_target` is positive a comparison line
// with the relative deviation is appended.
void render_table(const ModelSummary& s, std::ostream& out, std::int64_t published_target = 0);
// Columns: layer,name,out_channels,params,macs
void write_csv(const ModelSummary& s, std::ostream& out);

// Published #parm for the four reference configs at k=16 (0 when none).
[[nodiscard]] std::int64_t published_parameter_count(const GeneratorConfig& cfg);

}  // namespace voxelsr::models
