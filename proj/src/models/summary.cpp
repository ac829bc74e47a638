#include "voxelsr/models/summary.hpp"

#include <algorithm>
#include <cstdio>
#include <ostream>

#include "voxelsr/models/network.hpp"

namespace voxelsr::models {

namespace {

std::string dims(std::initializer_list<std::int64_t> d) {
    std::string s;
    for (auto v : d) s += (s.empty() ? "" : "x") + std::to_string(v);
    return s;
}

std::string grouped(std::int64_t v) {
    std::string s = std::to_string(v);
    for (int i = static_cast<int>(s.size()) - 3; i > 0; i -= 3) s.insert(static_cast<std::size_t>(i), ",");
    return s;
}

}  // namespace

ModelSummary summarize(const GeneratorConfig& cfg) {
    cfg.validate();
    ModelSummary s;
    s.title = "mDCSRN b" + std::to_string(cfg.blocks) + "u" + std::to_string(cfg.units);
    const std::int64_t k = cfg.growth, base = 2 * k, block_out = base + cfg.units * k, cin = cfg.input_channels;
    auto conv_row = [&](std::string name, std::int64_t in, std::int64_t out, std::int64_t ks) {
        const std::int64_t w = in * out * ks * ks * ks;
        s.layers.push_back({static_cast<int>(s.layers.size()), std::move(name), dims({out, in, ks, ks, ks}), out,
                            w + out, w});
    };
    conv_row("init.conv", cin, base, 3);
    for (int b = 1; b <= cfg.blocks; ++b) {
        const std::string block = "block" + std::to_string(b);
        if (b > 1) conv_row(block + ".compress", (b - 1) * block_out, base, 1);
        for (int u = 1; u <= cfg.units; ++u) {
            const std::string unit = block + ".unit" + std::to_string(u);
            const std::int64_t c = base + (u - 1) * k;
            if (cfg.unit_norm == UnitNorm::batch_norm) {
                s.layers.push_back({static_cast<int>(s.layers.size()), unit + ".norm", dims({c}), c, 2 * c, 0});
            }
            conv_row(unit + ".conv", c, k, 3);
        }
    }
    conv_row("recon", cfg.blocks * block_out, cin, 1);
    for (const auto& r : s.layers) {
        s.parameter_count += r.params;
        s.macs_per_output_voxel += r.macs;
    }
    return s;
}

void render_table(const ModelSummary& s, std::ostream& out, std::int64_t published_target) {
    out << s.title << "\n";
    char line[160];
    std::snprintf(line, sizeof line, "%5s  %-24s %-16s %8s %12s %12s\n", "layer", "name", "shape", "out_ch", "params",
                  "macs/voxel");
    out << line;
    for (const auto& r : s.layers) {
        std::snprintf(line, sizeof line, "%5d  %-24s %-16s %8lld %12s %12s\n", r.layer, r.name.c_str(),
                      r.shape.c_str(), static_cast<long long>(r.out_channels), grouped(r.params).c_str(),
                      grouped(r.macs).c_str());
        out << line;
    }
    out << "total parameters: " << grouped(s.parameter_count) << "\n";
    out << "total MACs per output voxel: " << grouped(s.macs_per_output_voxel) << "\n";
    if (published_target > 0) {
        const double dev = 100.0 * static_cast<double>(s.parameter_count - published_target) / static_cast<double>(published_target);
        std::snprintf(line, sizeof line, "published #parm: %s (deviation %+.2f%%)\n", grouped(published_target).c_str(), dev);
        out << line;
    }
}

void write_csv(const ModelSummary& s, std::ostream& out) {
    out << "layer,name,out_channels,params,macs\n";
    for (const auto& r : s.layers) {
        out << r.layer << ',' << r.name << ',' << r.out_channels << ',' << r.params << ',' << r.macs << '\n';
    }
}

std::int64_t published_parameter_count(const GeneratorConfig& cfg) {
    if (cfg.growth != 16 || cfg.input_channels != 1 || cfg.unit_norm != UnitNorm::batch_norm) return 0;
    struct Ref {
        int b, u;
        std::int64_t count;
    };
    static constexpr Ref refs[] = {{1, 8, 307'000}, {2, 4, 200'000}, {3, 4, 304'000}, {4, 4, 412'000}};
    const auto* it = std::find_if(std::begin(refs), std::end(refs),
                                  [&](const Ref& r) { return r.b == cfg.blocks && r.u == cfg.units; });
    return it == std::end(refs) ? 0 : it->count;
}

}  // namespace voxelsr::models
