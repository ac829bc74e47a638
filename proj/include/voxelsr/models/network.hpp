#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "voxelsr/autodiff/ops.hpp"
#include "voxelsr/models/config.hpp"

namespace voxelsr::models {

using ModelConfig = std::variant<GeneratorConfig, DiscriminatorConfig>;

// Named parameters in construction order, plus batch-norm running statistics
// keyed by the owning norm layer ("block1.unit2.norm").
template <typename T>
class ModelParams {
public:
    struct Entry {
        std::string name;
        ad::Tensor<T> value;
    };

    ModelParams() = default;
    explicit ModelParams(ModelConfig config) : config_(std::move(config)) {}

    [[nodiscard]] const ModelConfig& config() const noexcept { return config_; }
    [[nodiscard]] const std::vector<Entry>& entries() const noexcept { return entries_; }
    [[nodiscard]] std::size_t size() const noexcept { return entries_.size(); }
    [[nodiscard]] std::int64_t element_count() const;

    // Throws std::out_of_range for unknown names.
    [[nodiscard]] const ad::Tensor<T>& at(const std::string& name) const;
    void add(std::string name, ad::Tensor<T> value);
    // Replaces the value of an existing parameter; the shape must match.
    void set(const std::string& name, ad::Tensor<T> value);
    void set(std::size_t index, ad::Tensor<T> value);

    [[nodiscard]] std::map<std::string, ad::RunningStats<T>>& norm_stats() noexcept { return stats_; }
    [[nodiscard]] const std::map<std::string, ad::RunningStats<T>>& norm_stats() const noexcept { return stats_; }
    // True when every batch-norm layer has running statistics.
    [[nodiscard]] bool stats_populated() const;

    // Re-stores every parameter as a fresh leaf with the given flag, so a
    // forward pass records gradients with respect to them.
    void set_requires_grad(bool flag);

    template <typename U>
    [[nodiscard]] ModelParams<U> cast() const;

private:
    ModelConfig config_;
    std::vector<Entry> entries_;
    std::map<std::string, std::size_t> index_;
    std::map<std::string, ad::RunningStats<T>> stats_;
};

template <typename T>
template <typename U>
ModelParams<U> ModelParams<T>::cast() const {
    ModelParams<U> out(config_);
    for (const auto& e : entries_) out.add(e.name, e.value.template cast<U>());
    for (const auto& [name, s] : stats_) {
        out.norm_stats()[name] =
            ad::RunningStats<U>{s.mean.template cast<U>(), s.var.template cast<U>(), s.batches_tracked, s.momentum};
    }
    return out;
}

// Deterministic construction: conv weights ~ N(0, 2/fan_in), biases 0,
// norm gains 1 and biases 0.
template <typename T>
ModelParams<T> build_generator(const GeneratorConfig& cfg, std::uint64_t seed);

template <typename T>
ModelParams<T> build_discriminator(const DiscriminatorConfig& cfg, std::uint64_t seed);

// How batch-norm units behave during a generator forward pass.
enum class NormUse {
    train,        // batch statistics, running statistics updated
    batch_only,   // batch statistics, running statistics untouched
    eval,         // running statistics (must be populated)
};

// lr: (N, input_channels, D, H, W). Output has the same shape.
template <typename T>
ad::Tensor<T> generator_forward(ModelParams<T>& params, const ad::Tensor<T>& lr, NormUse use = NormUse::train);
// Const overload; NormUse::train is rejected since it would mutate statistics.
template <typename T>
ad::Tensor<T> generator_forward(const ModelParams<T>& params, const ad::Tensor<T>& lr, NormUse use);

// x: (N, input_channels, patch...). Returns one unbounded score per item, shape (N).
template <typename T>
ad::Tensor<T> discriminator_forward(const ModelParams<T>& params, const ad::Tensor<T>& x);

// Receptive-field radius of the generator in voxels (each 3^3 conv adds 1).
[[nodiscard]] int receptive_radius(const GeneratorConfig& cfg);

[[nodiscard]] std::int64_t count_parameters(const GeneratorConfig& cfg);
[[nodiscard]] std::int64_t count_parameters(const DiscriminatorConfig& cfg);
// Conv multiply-accumulates per output voxel (same padding, stride 1).
[[nodiscard]] std::int64_t count_macs(const GeneratorConfig& cfg);
[[nodiscard]] std::int64_t count_macs(const GeneratorConfig& cfg, std::int64_t reference_voxels);

}  // namespace voxelsr::models
