#include "voxelsr/models/config.hpp"

#include <charconv>
#include <vector>

namespace voxelsr::models {

namespace {

std::string shortest(double v) {
    char buf[32];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

std::vector<std::string_view> split(std::string_view text, char sep) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const auto pos = text.find(sep, start);
        out.push_back(text.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

template <typename N>
bool parse_number(std::string_view s, N& out) {
    if (s.empty()) return false;
    auto res = std::from_chars(s.data(), s.data() + s.size(), out);
    return res.ec == std::errc() && res.ptr == s.data() + s.size();
}

[[noreturn]] void bad_generator(std::string_view text, std::string_view why) {
    throw ConfigError("cannot parse architecture '" + std::string(text) + "' (" + std::string(why) +
                      "); expected " + std::string(generator_grammar) + ", e.g. b4u4:k16");
}

}  // namespace

void GeneratorConfig::validate() const {
    if (blocks < 1) throw ConfigError("generator: blocks must be >= 1");
    if (units < 1) throw ConfigError("generator: units per block must be >= 1");
    if (growth < 1) throw ConfigError("generator: growth rate k must be >= 1");
    if (input_channels < 1) throw ConfigError("generator: input_channels must be >= 1");
    if (activation.kind == ad::ActivationKind::leaky_relu && !(activation.alpha >= 0.0)) {
        throw ConfigError("generator: leaky slope must be non-negative");
    }
}

std::string render(const GeneratorConfig& cfg) {
    std::string out = "b" + std::to_string(cfg.blocks) + "u" + std::to_string(cfg.units) + ":k" +
                      std::to_string(cfg.growth);
    if (cfg.input_channels != 1) out += ":c" + std::to_string(cfg.input_channels);
    switch (cfg.activation.kind) {
        case ad::ActivationKind::elu: break;
        case ad::ActivationKind::relu: out += ":relu"; break;
        case ad::ActivationKind::leaky_relu: out += ":leaky" + shortest(cfg.activation.alpha); break;
    }
    if (cfg.unit_norm == UnitNorm::none) out += ":nonorm";
    return out;
}

GeneratorConfig parse_generator(std::string_view text) {
    const auto parts = split(text, ':');
    GeneratorConfig cfg;
    const std::string_view head = parts[0];
    const auto u = head.find('u');
    if (head.size() < 4 || head[0] != 'b' || u == std::string_view::npos) bad_generator(text, "missing bXuY");
    if (!parse_number(head.substr(1, u - 1), cfg.blocks) || !parse_number(head.substr(u + 1), cfg.units)) {
        bad_generator(text, "block/unit counts must be integers");
    }
    for (std::size_t i = 1; i < parts.size(); ++i) {
        const std::string_view p = parts[i];
        if (p.size() > 1 && p[0] == 'k') {
            if (!parse_number(p.substr(1), cfg.growth)) bad_generator(text, "bad growth");
        } else if (p.size() > 1 && p[0] == 'c') {
            if (!parse_number(p.substr(1), cfg.input_channels)) bad_generator(text, "bad channel count");
        } else if (p == "elu") {
            cfg.activation = {ad::ActivationKind::elu, cfg.activation.alpha};
        } else if (p == "relu") {
            cfg.activation.kind = ad::ActivationKind::relu;
        } else if (p.starts_with("leaky")) {
            cfg.activation.kind = ad::ActivationKind::leaky_relu;
            if (!parse_number(p.substr(5), cfg.activation.alpha)) bad_generator(text, "bad leaky slope");
        } else if (p == "nonorm") {
            cfg.unit_norm = UnitNorm::none;
        } else {
            bad_generator(text, "unknown option '" + std::string(p) + "'");
        }
    }
    try {
        cfg.validate();
    } catch (const ConfigError& e) {
        bad_generator(text, e.what());
    }
    return cfg;
}

void DiscriminatorConfig::validate() const {
    if (base_width < 1) throw ConfigError("critic: base_width must be >= 1");
    if (stages < 1) throw ConfigError("critic: stages must be >= 1");
    if (dense_width < 1) throw ConfigError("critic: dense_width must be >= 1");
    if (input_channels < 1) throw ConfigError("critic: input_channels must be >= 1");
    if (!(leaky_slope >= 0.0)) throw ConfigError("critic: leaky slope must be non-negative");
    const std::int64_t need = std::int64_t{1} << stages;
    for (auto p : patch) {
        if (p < need) {
            throw ConfigError("critic: patch extent " + std::to_string(p) + " is too small for " +
                              std::to_string(stages) + " stride-2 stages (need >= " + std::to_string(need) + ")");
        }
    }
}

std::array<std::int64_t, 3> DiscriminatorConfig::final_extent() const {
    auto e = patch;
    for (int s = 0; s < stages; ++s)
        for (auto& v : e) v = (v + 1) / 2;
    return e;
}

std::int64_t DiscriminatorConfig::final_width() const {
    return static_cast<std::int64_t>(base_width) << (stages - 1);
}

std::string render(const DiscriminatorConfig& cfg) {
    return "critic:w" + std::to_string(cfg.base_width) + ":s" + std::to_string(cfg.stages) + ":d" +
           std::to_string(cfg.dense_width) + ":a" + shortest(cfg.leaky_slope) + ":c" +
           std::to_string(cfg.input_channels) + ":p" + std::to_string(cfg.patch[0]) + "x" +
           std::to_string(cfg.patch[1]) + "x" + std::to_string(cfg.patch[2]);
}

DiscriminatorConfig parse_discriminator(std::string_view text) {
    const auto parts = split(text, ':');
    auto fail = [&](std::string_view why) -> ConfigError {
        return ConfigError("cannot parse critic '" + std::string(text) + "' (" + std::string(why) +
                           "); expected critic:wN:sN:dN:aX:cN:pDxHxW");
    };
    if (parts[0] != "critic") throw fail("missing 'critic' prefix");
    DiscriminatorConfig cfg;
    for (std::size_t i = 1; i < parts.size(); ++i) {
        const std::string_view p = parts[i];
        if (p.empty()) throw fail("empty field");
        const std::string_view v = p.substr(1);
        bool ok = false;
        switch (p[0]) {
            case 'w': ok = parse_number(v, cfg.base_width); break;
            case 's': ok = parse_number(v, cfg.stages); break;
            case 'd': ok = parse_number(v, cfg.dense_width); break;
            case 'a': ok = parse_number(v, cfg.leaky_slope); break;
            case 'c': ok = parse_number(v, cfg.input_channels); break;
            case 'p': {
                const auto dims = split(v, 'x');
                ok = dims.size() == 3;
                for (std::size_t a = 0; ok && a < 3; ++a) ok = parse_number(dims[a], cfg.patch[a]);
                break;
            }
            default: break;
        }
        if (!ok) throw fail("bad field '" + std::string(p) + "'");
    }
    try {
        cfg.validate();
    } catch (const ConfigError& e) {
        throw fail(e.what());
    }
    return cfg;
}

}  // namespace voxelsr::models
