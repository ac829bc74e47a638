#include "voxelsr/models/network.hpp"

#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>

namespace voxelsr::models {

using ad::Shape;
using ad::Tensor;

template <typename T>
std::int64_t ModelParams<T>::element_count() const {
    std::int64_t n = 0;
    for (const auto& e : entries_) n += e.value.numel();
    return n;
}

template <typename T>
const Tensor<T>& ModelParams<T>::at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named '" + name + "'");
    return entries_[it->second].value;
}

template <typename T>
void ModelParams<T>::add(std::string name, Tensor<T> value) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter name '" + name + "'");
    index_.emplace(name, entries_.size());
    entries_.push_back({std::move(name), std::move(value)});
}

template <typename T>
void ModelParams<T>::set(const std::string& name, Tensor<T> value) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named '" + name + "'");
    set(it->second, std::move(value));
}

template <typename T>
void ModelParams<T>::set(std::size_t index, Tensor<T> value) {
    auto& e = entries_.at(index);
    if (!(e.value.shape() == value.shape())) {
        throw ad::ShapeError("parameter '" + e.name + "': shape " + e.value.shape().str() + " cannot take " +
                             value.shape().str());
    }
    e.value = std::move(value);
}

template <typename T>
bool ModelParams<T>::stats_populated() const {
    for (const auto& [name, s] : stats_)
        if (!s.populated()) return false;
    return true;
}

template <typename T>
void ModelParams<T>::set_requires_grad(bool flag) {
    for (auto& e : entries_) {
        auto leaf = e.value.detach();
        leaf.set_requires_grad(flag);
        e.value = std::move(leaf);
    }
}

namespace {

// Box-Muller over raw mt19937_64 bits, so values do not depend on the
// standard library's distribution implementations.
class NormalSource {
public:
    explicit NormalSource(std::uint64_t seed) : rng_(seed) {}

    double next() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        while (u1 <= 0.0) u1 = unit();
        const double u2 = unit();
        const double r = std::sqrt(-2.0 * std::log(u1));
        spare_ = r * std::sin(2.0 * std::numbers::pi * u2);
        has_spare_ = true;
        return r * std::cos(2.0 * std::numbers::pi * u2);
    }

private:
    double unit() { return static_cast<double>(rng_() >> 11) * 0x1.0p-53; }

    std::mt19937_64 rng_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

template <typename T>
Tensor<T> he_normal(const Shape& shape, std::int64_t fan_in, NormalSource& src) {
    const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
    std::vector<T> v(static_cast<std::size_t>(shape.numel()));
    for (auto& e : v) e = static_cast<T>(sd * src.next());
    return Tensor<T>(shape, std::move(v));
}

template <typename T>
void add_conv(ModelParams<T>& p, const std::string& prefix, std::int64_t cin, std::int64_t cout, std::int64_t k,
              NormalSource& src) {
    p.add(prefix + ".weight", he_normal<T>(Shape{cout, cin, k, k, k}, cin * k * k * k, src));
    p.add(prefix + ".bias", Tensor<T>::zeros(Shape{cout}));
}

template <typename T>
void add_norm(ModelParams<T>& p, const std::string& prefix, std::int64_t channels) {
    p.add(prefix + ".gain", Tensor<T>::ones(Shape{channels}));
    p.add(prefix + ".bias", Tensor<T>::zeros(Shape{channels}));
}

std::string unit_prefix(int block, int unit) {
    return "block" + std::to_string(block) + ".unit" + std::to_string(unit);
}

// Channel bookkeeping shared by the builder, the forward pass and the counters.
struct GeneratorLayout {
    std::int64_t k, base, block_out;

    explicit GeneratorLayout(const GeneratorConfig& cfg)
        : k(cfg.growth), base(2 * std::int64_t{cfg.growth}), block_out(base + std::int64_t{cfg.units} * cfg.growth) {}

    [[nodiscard]] std::int64_t unit_in(int unit) const { return base + (unit - 1) * k; }
    [[nodiscard]] std::int64_t compress_in(int block) const { return (block - 1) * block_out; }
};

std::string stage_prefix(int stage, const char* part) {
    return "stage" + std::to_string(stage) + "." + part;
}

}  // namespace

template <typename T>
ModelParams<T> build_generator(const GeneratorConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    const GeneratorLayout lay(cfg);
    NormalSource src(seed);
    ModelParams<T> p(cfg);
    add_conv(p, "init.conv", cfg.input_channels, lay.base, 3, src);
    for (int b = 1; b <= cfg.blocks; ++b) {
        if (b > 1) add_conv(p, "block" + std::to_string(b) + ".compress", lay.compress_in(b), lay.base, 1, src);
        for (int u = 1; u <= cfg.units; ++u) {
            const auto prefix = unit_prefix(b, u);
            if (cfg.unit_norm == UnitNorm::batch_norm) {
                add_norm(p, prefix + ".norm", lay.unit_in(u));
                p.norm_stats()[prefix + ".norm"] = ad::RunningStats<T>::fresh(lay.unit_in(u));
            }
            add_conv(p, prefix + ".conv", lay.unit_in(u), lay.k, 3, src);
        }
    }
    add_conv(p, "recon", cfg.blocks * lay.block_out, cfg.input_channels, 1, src);
    return p;
}

template <typename T>
ModelParams<T> build_discriminator(const DiscriminatorConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    NormalSource src(seed);
    ModelParams<T> p(cfg);
    std::int64_t width = cfg.base_width;
    add_conv(p, "conv0", cfg.input_channels, width, 3, src);
    for (int s = 1; s <= cfg.stages; ++s) {
        add_conv(p, stage_prefix(s, "down"), width, width, 3, src);
        add_norm(p, stage_prefix(s, "down.norm"), width);
        if (s < cfg.stages) {
            add_conv(p, stage_prefix(s, "widen"), width, 2 * width, 3, src);
            add_norm(p, stage_prefix(s, "widen.norm"), 2 * width);
            width *= 2;
        }
    }
    const auto e = cfg.final_extent();
    const std::int64_t flat = width * e[0] * e[1] * e[2];
    p.add("dense.weight", he_normal<T>(Shape{cfg.dense_width, flat}, flat, src));
    p.add("dense.bias", Tensor<T>::zeros(Shape{cfg.dense_width}));
    p.add("score.weight", he_normal<T>(Shape{1, cfg.dense_width}, cfg.dense_width, src));
    p.add("score.bias", Tensor<T>::zeros(Shape{1}));
    return p;
}

namespace {

template <typename T>
Tensor<T> conv(const ModelParams<T>& p, const std::string& prefix, const Tensor<T>& x, std::int64_t stride = 1) {
    return ad::conv3d(x, p.at(prefix + ".weight"), p.at(prefix + ".bias"), stride, ad::Padding::same);
}

template <typename T>
Tensor<T> cat(const std::vector<Tensor<T>>& xs) {
    return ad::concat_channels<T>(std::span<const Tensor<T>>(xs));
}

template <typename T>
Tensor<T> run_generator(const ModelParams<T>& p, std::map<std::string, ad::RunningStats<T>>* stats,
                        const Tensor<T>& x, NormUse use) {
    const auto* cfg = std::get_if<GeneratorConfig>(&p.config());
    if (!cfg) throw std::invalid_argument("generator_forward: parameters were not built for a generator");
    if (x.shape().rank() != 5 || x.shape()[1] != cfg->input_channels) {
        throw ad::ShapeError("generator_forward: expected (N," + std::to_string(cfg->input_channels) +
                             ",D,H,W) input, got " + x.shape().str());
    }
    const Tensor<T> first = conv(p, "init.conv", x);
    std::vector<Tensor<T>> outputs;
    for (int b = 1; b <= cfg->blocks; ++b) {
        std::vector<Tensor<T>> feats;
        feats.push_back(b == 1 ? first : conv(p, "block" + std::to_string(b) + ".compress", cat(outputs)));
        for (int u = 1; u <= cfg->units; ++u) {
            const auto prefix = unit_prefix(b, u);
            Tensor<T> h = cat(feats);
            if (cfg->unit_norm == UnitNorm::batch_norm) {
                const auto name = prefix + ".norm";
                ad::RunningStats<T> frozen;
                ad::RunningStats<T>* rs = nullptr;
                if (use == NormUse::train) rs = &stats->at(name);
                if (use == NormUse::eval) rs = &(frozen = p.norm_stats().at(name));
                h = ad::batch_norm(h, p.at(name + ".gain"), p.at(name + ".bias"), rs,
                                   use == NormUse::eval ? ad::Mode::eval : ad::Mode::train);
            }
            h = ad::activation(h, cfg->activation);
            feats.push_back(conv(p, prefix + ".conv", h));
        }
        outputs.push_back(cat(feats));
    }
    return conv(p, "recon", cat(outputs));
}

}  // namespace

template <typename T>
Tensor<T> generator_forward(ModelParams<T>& params, const Tensor<T>& lr, NormUse use) {
    return run_generator(params, &params.norm_stats(), lr, use);
}

template <typename T>
Tensor<T> generator_forward(const ModelParams<T>& params, const Tensor<T>& lr, NormUse use) {
    if (use == NormUse::train) {
        throw std::invalid_argument("generator_forward: NormUse::train needs mutable parameters");
    }
    return run_generator<T>(params, nullptr, lr, use);
}

template <typename T>
Tensor<T> discriminator_forward(const ModelParams<T>& p, const Tensor<T>& x) {
    const auto* cfg = std::get_if<DiscriminatorConfig>(&p.config());
    if (!cfg) throw std::invalid_argument("discriminator_forward: parameters were not built for a critic");
    const auto& s = x.shape();
    if (s.rank() != 5 || s[1] != cfg->input_channels || s[2] != cfg->patch[0] || s[3] != cfg->patch[1] ||
        s[4] != cfg->patch[2]) {
        throw ad::ShapeError("discriminator_forward: expected (N," + std::to_string(cfg->input_channels) + "," +
                             std::to_string(cfg->patch[0]) + "," + std::to_string(cfg->patch[1]) + "," +
                             std::to_string(cfg->patch[2]) + ") input, got " + s.str());
    }
    const double a = cfg->leaky_slope;
    auto norm_act = [&](const Tensor<T>& h, const std::string& prefix) {
        return ad::leaky_relu(ad::layer_norm(h, p.at(prefix + ".gain"), p.at(prefix + ".bias")), a);
    };
    Tensor<T> h = ad::leaky_relu(conv(p, "conv0", x), a);
    for (int st = 1; st <= cfg->stages; ++st) {
        h = norm_act(conv(p, stage_prefix(st, "down"), h, 2), stage_prefix(st, "down.norm"));
        if (st < cfg->stages) h = norm_act(conv(p, stage_prefix(st, "widen"), h), stage_prefix(st, "widen.norm"));
    }
    const std::int64_t n = s[0];
    h = ad::reshape(h, Shape{n, h.numel() / n});
    h = ad::leaky_relu(ad::linear(h, p.at("dense.weight"), p.at("dense.bias")), a);
    return ad::reshape(ad::linear(h, p.at("score.weight"), p.at("score.bias")), Shape{n});
}

int receptive_radius(const GeneratorConfig& cfg) {
    cfg.validate();
    return 1 + cfg.blocks * cfg.units;
}

std::int64_t count_parameters(const GeneratorConfig& cfg) {
    cfg.validate();
    const GeneratorLayout lay(cfg);
    const std::int64_t cin = cfg.input_channels;
    std::int64_t n = cin * lay.base * 27 + lay.base;
    for (int b = 1; b <= cfg.blocks; ++b) {
        if (b > 1) n += lay.compress_in(b) * lay.base + lay.base;
        for (int u = 1; u <= cfg.units; ++u) {
            const std::int64_t c = lay.unit_in(u);
            if (cfg.unit_norm == UnitNorm::batch_norm) n += 2 * c;
            n += c * lay.k * 27 + lay.k;
        }
    }
    return n + cfg.blocks * lay.block_out * cin + cin;
}

std::int64_t count_parameters(const DiscriminatorConfig& cfg) {
    cfg.validate();
    std::int64_t w = cfg.base_width;
    std::int64_t n = cfg.input_channels * w * 27 + w;
    for (int s = 1; s <= cfg.stages; ++s) {
        n += w * w * 27 + w + 2 * w;
        if (s < cfg.stages) {
            n += w * 2 * w * 27 + 2 * w + 4 * w;
            w *= 2;
        }
    }
    const auto e = cfg.final_extent();
    const std::int64_t flat = w * e[0] * e[1] * e[2];
    return n + flat * cfg.dense_width + cfg.dense_width + cfg.dense_width + 1;
}

std::int64_t count_macs(const GeneratorConfig& cfg) {
    cfg.validate();
    const GeneratorLayout lay(cfg);
    const std::int64_t cin = cfg.input_channels;
    std::int64_t m = cin * lay.base * 27;
    for (int b = 1; b <= cfg.blocks; ++b) {
        if (b > 1) m += lay.compress_in(b) * lay.base;
        for (int u = 1; u <= cfg.units; ++u) m += lay.unit_in(u) * lay.k * 27;
    }
    return m + cfg.blocks * lay.block_out * cin;
}

std::int64_t count_macs(const GeneratorConfig& cfg, std::int64_t reference_voxels) {
    if (reference_voxels < 0) throw std::invalid_argument("count_macs: negative voxel count");
    return count_macs(cfg) * reference_voxels;
}

#define VOXELSR_INSTANTIATE_MODELS(T)                                                                  \
    template class ModelParams<T>;                                                                     \
    template ModelParams<T> build_generator<T>(const GeneratorConfig&, std::uint64_t);                 \
    template ModelParams<T> build_discriminator<T>(const DiscriminatorConfig&, std::uint64_t);         \
    template Tensor<T> generator_forward<T>(ModelParams<T>&, const Tensor<T>&, NormUse);                \
    template Tensor<T> generator_forward<T>(const ModelParams<T>&, const Tensor<T>&, NormUse);          \
    template Tensor<T> discriminator_forward<T>(const ModelParams<T>&, const Tensor<T>&);

VOXELSR_INSTANTIATE_MODELS(float)
VOXELSR_INSTANTIATE_MODELS(double)

}  // namespace voxelsr::models
