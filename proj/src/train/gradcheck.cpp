#include "voxelsr/train/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "voxelsr/autodiff/engine.hpp"
#include "voxelsr/autodiff/ops.hpp"
#include "voxelsr/models/network.hpp"
#include "voxelsr/train/losses.hpp"

namespace voxelsr::train {
namespace {

using T64 = ad::Tensor<double>;
using Inputs = std::vector<T64>;
using Objective = std::function<T64(const Inputs&)>;

constexpr double fd_step = 1e-6;
constexpr std::size_t small_probes = 12;

T64 random_tensor(const ad::Shape& shape, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> dist(0.0, scale);
    std::vector<double> v(static_cast<std::size_t>(shape.numel()));
    for (auto& x : v) x = dist(rng);
    return T64(shape, std::move(v));
}

T64 leaf(const T64& t) {
    T64 out(t.shape(), t.to_vector());
    out.set_requires_grad(true);
    return out;
}

T64 perturbed(const T64& t, std::size_t index, double delta) {
    auto v = t.to_vector();
    v[index] += delta;
    T64 out(t.shape(), std::move(v));
    out.set_requires_grad(true);
    return out;
}

std::vector<std::size_t> probe_indices(std::size_t count, GradcheckSize size, std::mt19937_64& rng) {
    std::vector<std::size_t> idx(count);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (size == GradcheckSize::full || count <= small_probes) return idx;
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(small_probes);
    std::sort(idx.begin(), idx.end());
    return idx;
}

double evaluate(const Objective& f, const Inputs& inputs, int order) {
    if (order == 1) {
        ad::NoGradGuard no_grad;
        return f(inputs).item();
    }
    return f(inputs).item();
}

// Probes every input tensor; the analytic gradient comes from one backward pass.
GradcheckCase check(std::string name, int order, const Objective& f, const Inputs& at, GradcheckSize size,
                    std::mt19937_64& rng) {
    Inputs inputs;
    for (const auto& t : at) inputs.push_back(leaf(t));
    const auto loss = f(inputs);
    const auto grads = ad::grad(loss, std::span<const T64>(inputs), false, ad::Unreachable::zero);

    GradcheckCase out;
    out.name = std::move(name);
    out.order = order;
    out.tolerance = order == 1 ? first_order_tolerance : second_order_tolerance;
    double max_diff = 0, max_numeric = 0;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        const auto analytic = grads[k].to_vector();
        for (std::size_t i : probe_indices(analytic.size(), size, rng)) {
            Inputs plus = inputs, minus = inputs;
            plus[k] = perturbed(inputs[k], i, fd_step);
            minus[k] = perturbed(inputs[k], i, -fd_step);
            const double numeric = (evaluate(f, plus, order) - evaluate(f, minus, order)) / (2 * fd_step);
            max_diff = std::max(max_diff, std::abs(analytic[i] - numeric));
            max_numeric = std::max(max_numeric, std::abs(numeric));
            ++out.coordinates;
        }
    }
    out.error = max_numeric > 0 ? max_diff / max_numeric : max_diff;
    return out;
}

// A fixed random projection turns any tensor into a scalar with a
// non-degenerate gradient.
T64 project(const T64& y, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return ad::sum(ad::mul(y, random_tensor(y.shape(), rng)));
}

models::ModelParams<double> with_values(const models::ModelParams<double>& base, const Inputs& values) {
    models::ModelParams<double> p(base.config());
    for (std::size_t i = 0; i < values.size(); ++i) p.add(base.entries()[i].name, values[i]);
    return p;
}

Inputs values_of(const models::ModelParams<double>& p) {
    Inputs out;
    for (const auto& e : p.entries()) out.push_back(e.value);
    return out;
}

}  // namespace

std::vector<GradcheckCase> run_gradcheck(GradcheckSize size, const std::function<void(const GradcheckCase&)>& progress) {
    std::mt19937_64 rng(20170510);
    std::vector<GradcheckCase> cases;
    auto run = [&](std::string name, int order, const Objective& f, const Inputs& at) {
        cases.push_back(check(std::move(name), order, f, at, size, rng));
        if (progress) progress(cases.back());
    };
    const ad::Shape vol{2, 3, 5, 4, 6};

    run("elementwise chain", 1,
        [](const Inputs& in) {
            auto y = ad::mul(ad::elu(in[0]), ad::sqrt(ad::add_scalar(ad::square(in[1]), 1.0)));
            return project(ad::sub(y, ad::mul_scalar(ad::reciprocal(ad::add_scalar(ad::abs(in[1]), 0.5)), 0.3)), 1);
        },
        {random_tensor(vol, rng), random_tensor(vol, rng)});

    run("leaky_relu", 1, [](const Inputs& in) { return project(ad::leaky_relu(in[0], 0.2), 2); },
        {random_tensor(vol, rng)});

    run("linear", 1, [](const Inputs& in) { return project(ad::linear(in[0], in[1], in[2]), 3); },
        {random_tensor(ad::Shape{3, 7}, rng), random_tensor(ad::Shape{5, 7}, rng), random_tensor(ad::Shape{5}, rng)});

    for (std::int64_t stride : {1, 2}) {
        run("conv3d same stride " + std::to_string(stride), 1,
            [stride](const Inputs& in) { return project(ad::conv3d(in[0], in[1], in[2], stride), 4); },
            {random_tensor(vol, rng), random_tensor(ad::Shape{4, 3, 3, 3, 3}, rng, 0.3),
             random_tensor(ad::Shape{4}, rng)});
    }
    run("conv3d valid anisotropic", 1,
        [](const Inputs& in) { return project(ad::conv3d(in[0], in[1], 1, ad::Padding::valid), 5); },
        {random_tensor(vol, rng), random_tensor(ad::Shape{2, 3, 3, 2, 1}, rng, 0.3)});

    run("layer_norm", 1, [](const Inputs& in) { return project(ad::layer_norm(in[0], in[1], in[2]), 6); },
        {random_tensor(vol, rng), random_tensor(ad::Shape{3}, rng), random_tensor(ad::Shape{3}, rng)});

    run("batch_norm", 1,
        [](const Inputs& in) {
            return project(ad::batch_norm<double>(in[0], in[1], in[2], nullptr, ad::Mode::train), 7);
        },
        {random_tensor(vol, rng), random_tensor(ad::Shape{3}, rng), random_tensor(ad::Shape{3}, rng)});

    run("concat and slice", 1,
        [](const Inputs& in) {
            const std::vector<T64> parts{in[0], ad::elu(in[1])};
            auto cat = ad::concat_channels(std::span<const T64>(parts));
            return project(ad::mul(ad::slice_channels(cat, 1, 3), ad::slice_channels(cat, 0, 3)), 8);
        },
        {random_tensor(ad::Shape{2, 2, 3, 3, 3}, rng), random_tensor(ad::Shape{2, 2, 3, 3, 3}, rng)});

    models::GeneratorConfig gcfg;
    gcfg.blocks = 1;
    gcfg.units = 2;
    gcfg.growth = 4;
    const auto generator = models::build_generator<double>(gcfg, 3);
    const T64 lr = random_tensor(ad::Shape{2, 1, 6, 6, 6}, rng);
    run("generator input", 1,
        [&](const Inputs& in) {
            return project(models::generator_forward(generator, in[0], models::NormUse::batch_only), 9);
        },
        {lr});
    run("generator parameters", 1,
        [&](const Inputs& in) {
            return project(models::generator_forward(with_values(generator, in), lr, models::NormUse::batch_only), 10);
        },
        values_of(generator));

    models::DiscriminatorConfig dcfg;
    dcfg.base_width = 2;
    dcfg.stages = 2;
    dcfg.dense_width = 6;
    dcfg.patch = {8, 8, 8};
    const auto critic = models::build_discriminator<double>(dcfg, 4);
    const T64 hr = random_tensor(ad::Shape{2, 1, 8, 8, 8}, rng);
    const T64 sr = random_tensor(ad::Shape{2, 1, 8, 8, 8}, rng);
    run("critic input", 1, [&](const Inputs& in) { return project(models::discriminator_forward(critic, in[0]), 11); },
        {hr});
    run("critic parameters", 1,
        [&](const Inputs& in) { return project(models::discriminator_forward(with_values(critic, in), hr), 12); },
        values_of(critic));

    const std::vector<double> eps{0.3, 0.8};
    run("gradient penalty wrt critic parameters", 2,
        [&](const Inputs& in) {
            const auto params = with_values(critic, in);
            const Critic<double> d = [&params](const T64& x) { return models::discriminator_forward(params, x); };
            return gradient_penalty(d, hr, sr, eps);
        },
        values_of(critic));

    run("conv3d double backward", 2,
        [](const Inputs& in) {
            const auto x = in[0].requires_grad() ? in[0] : leaf(in[0]);
            auto inner = project(ad::elu(ad::conv3d(x, in[1], 2)), 13);
            auto g = ad::grad(inner, x, true, ad::Unreachable::zero);
            return ad::sum(ad::square(g));
        },
        {random_tensor(ad::Shape{1, 2, 4, 5, 3}, rng), random_tensor(ad::Shape{3, 2, 3, 3, 3}, rng, 0.5)});

    return cases;
}

}  // namespace voxelsr::train
