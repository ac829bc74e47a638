#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

#include "voxelsr/autodiff/ops.hpp"

namespace voxelsr::models {

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

enum class UnitNorm { batch_norm, none };

// mDCSRN generator: b dense blocks of u units, growth k.
struct GeneratorConfig {
    int blocks = 4;
    int units = 4;
    int growth = 16;
    int input_channels = 1;
    ad::Activation activation{};
    UnitNorm unit_norm = UnitNorm::batch_norm;

    void validate() const;
    friend bool operator==(const GeneratorConfig&, const GeneratorConfig&) = default;
};

// "b4u4:k16". Non-default channel, activation and norm settings append
// ":c2", ":relu", ":leaky0.1", ":nonorm".
[[nodiscard]] std::string render(const GeneratorConfig& cfg);
// Accepts "bXuY" with optional ":kN" and the suffixes above. Throws ConfigError
// quoting the grammar.
[[nodiscard]] GeneratorConfig parse_generator(std::string_view text);

inline constexpr std::string_view generator_grammar = "bXuY[:kN][:cN][:elu|:relu|:leakyA][:nonorm]";

// SRGAN-style Wasserstein critic with LayerNorm. The patch shape is part of the
// config because the first dense layer's width depends on it.
struct DiscriminatorConfig {
    int base_width = 64;
    int stages = 4;
    double leaky_slope = 0.2;
    int dense_width = 1024;
    int input_channels = 1;
    std::array<std::int64_t, 3> patch{32, 32, 32};

    void validate() const;
    // Spatial extent after the stride-2 stack.
    [[nodiscard]] std::array<std::int64_t, 3> final_extent() const;
    [[nodiscard]] std::int64_t final_width() const;
    friend bool operator==(const DiscriminatorConfig&, const DiscriminatorConfig&) = default;
};

// "critic:w64:s4:d1024:a0.2:c1:p32x32x32"
[[nodiscard]] std::string render(const DiscriminatorConfig& cfg);
[[nodiscard]] DiscriminatorConfig parse_discriminator(std::string_view text);

}  // namespace voxelsr::models
