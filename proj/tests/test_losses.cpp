#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "test_util.hpp"
#include "voxelsr/autodiff/engine.hpp"
#include "voxelsr/models/network.hpp"
#include "voxelsr/train/losses.hpp"
#include "voxelsr/train/optim.hpp"

using namespace voxelsr;
using namespace voxelsr::train;
using ad::Tensor;

namespace {

Tensor<double> vec(std::vector<double> v) {
    const auto n = static_cast<std::int64_t>(v.size());
    return Tensor<double>(ad::Shape{n}, std::move(v));
}

// D(x) = sum_j w_j x_j per item, with x of shape (N, F).
Critic<double> linear_critic(const Tensor<double>& w) {
    return [w](const Tensor<double>& x) {
        return ad::reshape(ad::matmul(x, ad::reshape(w, ad::Shape{w.numel(), 1}), false, false),
                           ad::Shape{x.shape()[0]});
    };
}

models::DiscriminatorConfig toy_critic_config() {
    models::DiscriminatorConfig c;
    c.base_width = 3;
    c.stages = 1;
    c.dense_width = 5;
    c.patch = {4, 4, 4};
    return c;
}

Critic<double> network_critic(const models::ModelParams<double>& p) {
    return [&p](const Tensor<double>& x) { return models::discriminator_forward(p, x); };
}

double norm2(const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

}  // namespace

TEST_CASE("l1_loss") {
    CHECK(l1_loss(vec({1, 2}), vec({1, 2})).item() == 0.0);
    CHECK(l1_loss(vec({0, 0, 0}), vec({1, 1, 1})).item() == 1.0);
    CHECK(l1_loss(vec({0.5, 0.5}), vec({0, 1})).item() == 0.5);
    CHECK_THROWS_AS((void)l1_loss(vec({1}), vec({1, 2})), ad::ShapeError);

    auto sr = testutil::random_tensor<double>(ad::Shape{2, 1, 3, 3, 3}, 4);
    const auto hr = testutil::random_tensor<double>(ad::Shape{2, 1, 3, 3, 3}, 5);
    sr.set_requires_grad(true);
    const auto g = ad::grad(l1_loss(sr, hr), sr);
    // d/dsr mean|sr - hr| = sign(sr - hr) / count
    for (std::int64_t i = 0; i < sr.numel(); ++i) {
        const double sgn = sr[i] > hr[i] ? 1.0 : -1.0;
        CHECK(g[i] == doctest::Approx(sgn / 54.0).epsilon(1e-15));
    }
}

TEST_CASE("gan_generator_loss and combined_loss") {
    CHECK(gan_generator_loss(vec({2.0})).item() == -2.0);
    CHECK(gan_generator_loss(vec({1.0, 3.0})).item() == -2.0);
    CHECK(gan_generator_loss(vec({0.0, 0.0})).item() == 0.0);

    CHECK(combined_loss(Tensor<double>::scalar(0.1), Tensor<double>::scalar(-2.0), 0.001).item() ==
          doctest::Approx(0.098).epsilon(1e-15));
    CHECK(combined_loss(Tensor<double>::scalar(0.1), Tensor<double>::scalar(-2.0), 0.0).item() == 0.1);
    CHECK(combined_loss(Tensor<double>::scalar(0.0), Tensor<double>::scalar(0.0), 0.001).item() == 0.0);

    // Linearity in the GAN term; binary-exact operands make it exact.
    const auto a = Tensor<double>::scalar(0.5), b = Tensor<double>::scalar(-2.0), zero = Tensor<double>::scalar(0.0);
    CHECK(combined_loss(a, b, 0.25).item() - combined_loss(a, zero, 0.25).item() == 0.25 * -2.0);
    const auto r = testutil::uniform_values(40, 8);
    for (std::size_t i = 0; i + 1 < r.size(); i += 2) {
        const auto ai = Tensor<double>::scalar(r[i]), bi = Tensor<double>::scalar(r[i + 1]);
        const double lhs = combined_loss(ai, bi, 0.001).item() - combined_loss(ai, zero, 0.001).item();
        CHECK(std::abs(lhs - 0.001 * r[i + 1]) <= 4 * std::numeric_limits<double>::epsilon());
    }
}

TEST_CASE("gradient_penalty") {
    const auto hr = testutil::random_tensor<double>(ad::Shape{3, 6}, 1);
    const auto sr = testutil::random_tensor<double>(ad::Shape{3, 6}, 2);
    const std::vector<double> eps{0.1, 0.5, 0.9};

    SUBCASE("linear critic closed form (||w|| - 1)^2") {
        for (double scale : {1.0, 3.0, 0.25}) {
            auto w = testutil::random_tensor<double>(ad::Shape{6}, 3).to_vector();
            const double n = norm2(w);
            for (auto& x : w) x *= scale / n;
            const double gp = gradient_penalty(linear_critic(vec(w)), hr, sr, eps).item();
            CHECK(gp == doctest::Approx((scale - 1.0) * (scale - 1.0)).epsilon(1e-12));
            ad::NoGradGuard off;
            const auto quiet = gradient_penalty(linear_critic(vec(w)), hr, sr, eps);
            CHECK(quiet.item() == gp);
            CHECK_FALSE(quiet.requires_grad());
        }
    }
    SUBCASE("zero critic") {
        const Critic<double> zero = [](const Tensor<double>& x) { return Tensor<double>::zeros(ad::Shape{x.shape()[0]}); };
        CHECK(gradient_penalty(zero, hr, sr, eps).item() == 1.0);
        CHECK(critic_loss(zero, hr, sr, 10.0, eps).total.item() == 10.0);
        CHECK(em_distance_estimate(zero, hr, sr) == 0.0);
    }
    SUBCASE("non-negative") {
        const auto p = models::build_discriminator<double>(toy_critic_config(), 3);
        for (std::uint64_t s = 0; s < 5; ++s) {
            const auto a = testutil::random_tensor<double>(ad::Shape{2, 1, 4, 4, 4}, 10 + s);
            const auto b = testutil::random_tensor<double>(ad::Shape{2, 1, 4, 4, 4}, 20 + s);
            CHECK(gradient_penalty(network_critic(p), a, b, std::vector<double>{0.3, 0.7}).item() >= 0.0);
        }
    }
    SUBCASE("interpolate-gradient norms match a finite-difference oracle") {
        const auto p = models::build_discriminator<double>(toy_critic_config(), 5);
        const auto a = testutil::random_tensor<double>(ad::Shape{2, 1, 4, 4, 4}, 30);
        const auto b = testutil::random_tensor<double>(ad::Shape{2, 1, 4, 4, 4}, 31);
        const std::vector<double> e{0.25, 0.6};
        double expected = 0.0;
        for (std::int64_t i = 0; i < 2; ++i) {
            std::vector<double> xi(64);
            for (std::size_t j = 0; j < 64; ++j) {
                const auto k = static_cast<std::size_t>(i * 64) + j;
                xi[j] = e[static_cast<std::size_t>(i)] * a[static_cast<std::int64_t>(k)] +
                        (1 - e[static_cast<std::size_t>(i)]) * b[static_cast<std::int64_t>(k)];
            }
            const Tensor<double> x(ad::Shape{1, 1, 4, 4, 4}, xi);
            const auto fd = ad::finite_difference_gradient<double>(
                [&](const Tensor<double>& t) { return models::discriminator_forward(p, t).item(); }, x, 1e-6);
            const double n = norm2(fd.to_vector());
            expected += (n - 1) * (n - 1) / 2.0;
        }
        CHECK(gradient_penalty(network_critic(p), a, b, e).item() == doctest::Approx(expected).epsilon(1e-6));
    }
    SUBCASE("parameter gradient matches finite differences") {
        auto p = models::build_discriminator<double>(toy_critic_config(), 7);
        p.set_requires_grad(true);
        const auto a = testutil::random_tensor<double>(ad::Shape{2, 1, 4, 4, 4}, 40);
        const auto b = testutil::random_tensor<double>(ad::Shape{2, 1, 4, 4, 4}, 41);
        const std::vector<double> e{0.35, 0.8};
        const auto gp = gradient_penalty(network_critic(p), a, b, e);
        const auto grads = ad::backward(gp);
        for (std::size_t i = 0; i < p.size(); ++i) {
            const auto& entry = p.entries()[i];
            auto probe = p;
            const auto fd = ad::finite_difference_gradient<double>(
                [&](const Tensor<double>& t) {
                    probe.set(i, t);
                    return gradient_penalty(network_critic(probe), a, b, e).item();
                },
                entry.value.detach(), 1e-6);
            CAPTURE(entry.name);
            if (grads.contains(entry.value)) {
                CHECK(ad::relative_error(grads.at(entry.value), fd) < 1e-3);
            } else {
                // not on any path from the penalty (the score bias): the true gradient is zero
                for (double d : fd.to_vector()) CHECK(std::abs(d) < 1e-8);
            }
        }
    }
    SUBCASE("errors") {
        CHECK_THROWS_AS((void)gradient_penalty(linear_critic(vec(std::vector<double>(6, 1.0))), hr, sr,
                                               std::vector<double>{0.5}),
                        ad::ShapeError);
        const auto other = testutil::random_tensor<double>(ad::Shape{3, 5}, 2);
        CHECK_THROWS_AS((void)gradient_penalty(linear_critic(vec(std::vector<double>(6, 1.0))), hr, other, eps),
                        ad::ShapeError);
    }
}

TEST_CASE("critic_loss and em estimate") {
    const auto hr = testutil::random_tensor<double>(ad::Shape{2, 5}, 11);
    const auto sr = testutil::random_tensor<double>(ad::Shape{2, 5}, 12);
    const std::vector<double> eps{0.2, 0.4};
    auto w = testutil::uniform_values(5, 13);
    const double n = norm2(w);
    for (auto& x : w) x /= n;
    const auto unit = linear_critic(vec(w));

    CHECK(std::abs(critic_loss(unit, hr, hr, 10.0, eps).total.item()) < 1e-15);

    const auto fwd = critic_loss(unit, hr, sr, 10.0, eps);
    const auto rev = critic_loss(unit, sr, hr, 10.0, eps);
    CHECK(fwd.em_term == doctest::Approx(-rev.em_term).epsilon(1e-14));
    CHECK(fwd.penalty == doctest::Approx(rev.penalty).epsilon(1e-12));
    CHECK(fwd.total.item() == doctest::Approx(fwd.em_term + 10.0 * fwd.penalty).epsilon(1e-14));
    CHECK(em_distance_estimate(unit, hr, sr) == doctest::Approx(-fwd.em_term).epsilon(1e-14));

    const Critic<double> fixed = [](const Tensor<double>& x) {
        return x[0] > 0.5 ? vec({1.0, 1.0}) : vec({0.0, 0.0});
    };
    auto ones = Tensor<double>::ones(ad::Shape{2, 1});
    auto zeros = Tensor<double>::zeros(ad::Shape{2, 1});
    CHECK(em_distance_estimate(fixed, ones, zeros) == 1.0);

    const Critic<double> shifted = [&](const Tensor<double>& x) { return ad::add_scalar(unit(x), 7.5); };
    CHECK(em_distance_estimate(shifted, hr, sr) == doctest::Approx(em_distance_estimate(unit, hr, sr)).epsilon(1e-12));
}

TEST_CASE("adam_step") {
    models::GeneratorConfig gc;
    gc.blocks = 1;
    gc.units = 1;
    gc.growth = 2;

    SUBCASE("first step moves each parameter by lr * sign(g)") {
        auto p = models::build_generator<double>(gc, 1);
        const auto before = p;
        p.set_requires_grad(true);
        const auto x = testutil::random_tensor<double>(ad::Shape{1, 1, 4, 4, 4}, 2);
        const auto y = testutil::random_tensor<double>(ad::Shape{1, 1, 4, 4, 4}, 3);
        const auto grads = ad::backward(l1_loss(models::generator_forward(p, x), y));
        AdamState st;
        const double lr = 1e-3;
        std::vector<std::vector<double>> g;
        for (const auto& e : p.entries()) g.push_back(grads.at(e.value).to_vector());
        adam_step(p, grads, st, lr);
        CHECK(st.t == 1);
        for (std::size_t i = 0; i < p.size(); ++i) {
            const auto a = before.entries()[i].value.to_vector();
            const auto b = p.entries()[i].value.to_vector();
            for (std::size_t j = 0; j < a.size(); ++j) {
                const double gj = g[i][j];
                // |g| / (|g| + eps) is 1 up to eps / |g|.
                const double expect = gj == 0.0 ? 0.0 : lr * (gj > 0 ? 1.0 : -1.0) * std::abs(gj) / (std::abs(gj) + 1e-8);
                CHECK(a[j] - b[j] == doctest::Approx(expect).epsilon(1e-9));
            }
        }
    }
    SUBCASE("zero gradients leave parameters unchanged") {
        auto p = models::build_generator<double>(gc, 1);
        auto zero = [&] {
            ad::GradMap<double> g;
            for (const auto& e : p.entries()) g.insert(e.value, Tensor<double>::zeros(e.value.shape()));
            return g;
        };
        const auto before = p;
        AdamState st;
        adam_step(p, zero(), st, 0.1);
        adam_step(p, zero(), st, 0.1);
        CHECK(st.t == 2);
        for (std::size_t i = 0; i < p.size(); ++i) {
            CHECK(p.entries()[i].value.to_vector() == before.entries()[i].value.to_vector());
        }
    }
    SUBCASE("missing gradient is an error") {
        auto p = models::build_generator<double>(gc, 1);
        ad::GradMap<double> partial;
        partial.insert(p.entries()[0].value, Tensor<double>::zeros(p.entries()[0].value.shape()));
        AdamState st;
        CHECK_THROWS_AS(adam_step(p, partial, st, 0.1), TrainError);
        CHECK(st.t == 0);
    }
    SUBCASE("matches a scalar reference over several steps") {
        models::ModelParams<double> p(gc);
        p.add("theta", vec({0.3, -1.2}));
        p.set_requires_grad(true);
        AdamState st;
        double ref[2] = {0.3, -1.2}, m[2] = {0, 0}, v[2] = {0, 0};
        for (int t = 1; t <= 5; ++t) {
            // loss = sum theta^3 / 3, gradient theta^2
            const auto loss = ad::sum(ad::mul(ad::square(p.at("theta")), ad::mul_scalar(p.at("theta"), 1.0 / 3.0)));
            adam_step(p, ad::backward(loss), st, 0.01);
            for (int j = 0; j < 2; ++j) {
                const double g = ref[j] * ref[j];
                m[j] = 0.9 * m[j] + 0.1 * g;
                v[j] = 0.999 * v[j] + 0.001 * g * g;
                const double mh = m[j] / (1 - std::pow(0.9, t)), vh = v[j] / (1 - std::pow(0.999, t));
                ref[j] -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
            }
            CHECK(p.at("theta")[0] == doctest::Approx(ref[0]).epsilon(1e-14));
            CHECK(p.at("theta")[1] == doctest::Approx(ref[1]).epsilon(1e-14));
        }
    }
    SUBCASE("a small step decreases the L1 loss on the batch") {
        models::GeneratorConfig small;
        small.blocks = 1;
        small.units = 2;
        small.growth = 4;
        auto p = models::build_generator<double>(small, 9);
        p.set_requires_grad(true);
        const auto x = testutil::random_tensor<double>(ad::Shape{2, 1, 6, 6, 6}, 4);
        const auto y = testutil::random_tensor<double>(ad::Shape{2, 1, 6, 6, 6}, 5);
        const auto loss0 = l1_loss(models::generator_forward(p, x, models::NormUse::batch_only), y);
        AdamState st;
        adam_step(p, ad::backward(loss0), st, 1e-6);
        const double loss1 = l1_loss(models::generator_forward(p, x, models::NormUse::batch_only), y).item();
        CHECK(loss1 <= loss0.item() + 1e-12);
        CHECK(loss1 < loss0.item());
    }
}

TEST_CASE("schedule_next") {
    const ScheduleConfig cfg;
    auto run = [&](std::int64_t n, GanSchedule s = {}) {
        std::vector<Scheduled> out;
        for (std::int64_t i = 0; i < n; ++i) {
            out.push_back(schedule_next(s, cfg));
            s = out.back().next;
        }
        return out;
    };
    const auto steps = run(10000 + 8 * 62 + 4 + 200 + 16);
    for (std::int64_t i = 0; i < 10000; ++i) {
        REQUIRE(steps[static_cast<std::size_t>(i)].action == Action::critic_step);
        REQUIRE(steps[static_cast<std::size_t>(i)].phase == SchedulePhase::critic_warmup);
        REQUIRE(steps[static_cast<std::size_t>(i)].next.generator == 0);
    }
    // post-warmup: 7 critic, 1 generator
    for (std::size_t i = 10000; i < 10008; ++i) {
        CHECK(steps[i].action == (i == 10007 ? Action::generator_step : Action::critic_step));
        CHECK(steps[i].phase == SchedulePhase::alternating);
    }
    for (std::int64_t n = 0; n <= 62; ++n) {
        CHECK(steps[static_cast<std::size_t>(10000 + 8 * n - 1)].next.generator == n);
    }
    // 500 phase-2 actions = 62 full cycles + 4 critic steps; then 200 extra critic steps.
    CHECK(steps[10499].next.phase2 == 500);
    CHECK(steps[10499].next.generator == 62);
    for (std::size_t i = 10500; i < 10700; ++i) {
        CHECK(steps[i].action == Action::critic_step);
        CHECK(steps[i].phase == SchedulePhase::extra_critic);
    }
    // the cycle resumes where it paused: 3 more critic steps, then the generator
    for (std::size_t i = 10700; i < 10703; ++i) CHECK(steps[i].action == Action::critic_step);
    CHECK(steps[10703].action == Action::generator_step);
    CHECK(steps.back().next.total == static_cast<std::int64_t>(steps.size()));

    // Phase-2 boundaries count every action, extra ones included: the next run starts after 1000.
    const auto longer = run(11000 + 210);
    CHECK(longer[10999].phase != SchedulePhase::extra_critic);
    CHECK(longer[11000].phase == SchedulePhase::extra_critic);
    CHECK(longer[11199].phase == SchedulePhase::extra_critic);
    CHECK(longer[11200].phase == SchedulePhase::alternating);

    // ratio between extra runs
    std::int64_t critic = 0, gen = 0;
    for (std::size_t i = 10700; i < 11000; ++i) (longer[i].action == Action::critic_step ? critic : gen) += 1;
    CHECK(std::abs(static_cast<double>(critic) / static_cast<double>(gen) - 7.0) < 0.3);

    ScheduleConfig bad;
    bad.critic_per_gen = 0;
    CHECK_THROWS_AS(bad.validate(), TrainError);
}
