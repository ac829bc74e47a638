#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "test_util.hpp"
#include "voxelsr/autodiff/engine.hpp"
#include "voxelsr/models/checkpoint.hpp"
#include "voxelsr/models/summary.hpp"

using namespace voxelsr;
using namespace voxelsr::models;
using ad::Shape;
using ad::Tensor;
using testutil::random_tensor;

namespace {

GeneratorConfig gen(int b, int u, int k) {
    GeneratorConfig c;
    c.blocks = b;
    c.units = u;
    c.growth = k;
    return c;
}

DiscriminatorConfig tiny_critic() {
    DiscriminatorConfig c;
    c.base_width = 2;
    c.stages = 2;
    c.dense_width = 3;
    c.patch = {4, 4, 4};
    return c;
}

template <typename T>
ModelParams<T> zeroed(const ModelParams<T>& p) {
    ModelParams<T> z = p;
    for (std::size_t i = 0; i < z.size(); ++i) z.set(i, Tensor<T>::zeros(z.entries()[i].value.shape()));
    return z;
}

std::filesystem::path temp_path(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / "voxelsr_test_models";
    std::filesystem::create_directories(dir);
    return dir / name;
}

}  // namespace

TEST_CASE("config annotation round-trips") {
    for (const char* text : {"b4u4", "b1u8:k16", "b2u2:k8", "b3u4:k4:relu", "b1u1:k1:c2:leaky0.1:nonorm"}) {
        const auto cfg = parse_generator(text);
        CHECK(parse_generator(render(cfg)) == cfg);
    }
    CHECK(render(parse_generator("b4u4")) == "b4u4:k16");
    CHECK_THROWS_AS((void)parse_generator("b2u0"), ConfigError);
    CHECK_THROWS_AS((void)parse_generator("b2u4:k0"), ConfigError);
    CHECK_THROWS_AS((void)parse_generator("x2u4"), ConfigError);
    try {
        (void)parse_generator("banana");
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("bXuY") != std::string::npos);
    }
    CHECK_THROWS_AS(build_generator<double>(gen(1, 0, 4), 1), ConfigError);

    const auto c = tiny_critic();
    CHECK(parse_discriminator(render(c)) == c);
    CHECK_THROWS_AS((void)parse_discriminator("critic:w0"), ConfigError);
}

TEST_CASE("parameter counts") {
    // Closed form: init 1*32*27+32, units 2c + 16*27c + 16 with c = 32+16(j-1), recon 160+1.
    std::int64_t b1u8 = 1 * 32 * 27 + 32;
    for (int j = 1; j <= 8; ++j) {
        const std::int64_t c = 32 + 16 * (j - 1);
        b1u8 += 2 * c + c * 16 * 27 + 16;
    }
    b1u8 += 160 + 1;
    CHECK(b1u8 == 306'721);
    CHECK(count_parameters(gen(1, 8, 16)) == 306'721);
    CHECK(count_parameters(gen(2, 4, 16)) == 198'753);
    CHECK(count_parameters(gen(3, 4, 16)) == 302'305);
    CHECK(count_parameters(gen(4, 4, 16)) == 408'929);

    SUBCASE("within 1% of the published sizes") {
        for (auto [b, u, published] : {std::tuple{1, 8, 307'000.0}, {2, 4, 200'000.0}, {3, 4, 304'000.0},
                                       {4, 4, 412'000.0}}) {
            const double n = static_cast<double>(count_parameters(gen(b, u, 16)));
            CHECK(std::abs(n - published) / published < 0.01);
            CHECK(published_parameter_count(gen(b, u, 16)) == static_cast<std::int64_t>(published));
        }
    }
    SUBCASE("closed form equals materialized element count") {
        for (auto [b, u] : {std::pair{1, 8}, {2, 4}, {3, 4}, {4, 4}}) {
            for (int k : {4, 16}) {
                const auto cfg = gen(b, u, k);
                CHECK(build_generator<float>(cfg, 3).element_count() == count_parameters(cfg));
                auto nonorm = cfg;
                nonorm.unit_norm = UnitNorm::none;
                CHECK(build_generator<float>(nonorm, 3).element_count() == count_parameters(nonorm));
            }
        }
        for (const auto& c : {tiny_critic(), DiscriminatorConfig{}}) {
            CHECK(build_discriminator<float>(c, 5).element_count() == count_parameters(c));
        }
    }
    SUBCASE("monotone in b, u and k") {
        for (int b = 1; b <= 4; ++b)
            for (int u = 1; u <= 4; ++u)
                for (int k = 2; k <= 8; k += 2) {
                    const auto n = count_parameters(gen(b, u, k));
                    CHECK(count_parameters(gen(b + 1, u, k)) > n);
                    CHECK(count_parameters(gen(b, u + 1, k)) > n);
                    CHECK(count_parameters(gen(b, u, k + 1)) > n);
                }
    }
}

TEST_CASE("MAC counts") {
    CHECK(count_macs(gen(1, 8, 16)) == 305'152);
    CHECK(count_macs(gen(1, 8, 16), 10) == 3'051'520);
    const auto s = summarize(gen(2, 4, 16));
    const auto it = std::find_if(s.layers.begin(), s.layers.end(), [](const LayerRow& r) {
        return r.name == "block2.compress";
    });
    REQUIRE(it != s.layers.end());
    CHECK(it->macs == 96 * 32);
    for (int b = 1; b <= 3; ++b)
        for (int u = 1; u <= 4; ++u) CHECK(count_macs(gen(b, 2 * u, 8)) > count_macs(gen(b, u, 8)));
}

TEST_CASE("summary") {
    const auto s = summarize(gen(4, 4, 16));
    CHECK(s.parameter_count == 408'929);
    CHECK(s.macs_per_output_voxel == count_macs(gen(4, 4, 16)));
    std::int64_t rows = 0;
    for (const auto& r : s.layers) rows += r.params;
    CHECK(rows == s.parameter_count);

    std::ostringstream table;
    render_table(summarize(parse_generator("b2u4")), table);
    CHECK(table.str().rfind("mDCSRN b2u4", 0) == 0);

    std::ostringstream with_target;
    render_table(s, with_target, 412'000);
    CHECK(with_target.str().find("412,000") != std::string::npos);
    CHECK(with_target.str().find("-0.75%") != std::string::npos);

    std::ostringstream csv;
    write_csv(s, csv);
    std::string header;
    std::istringstream lines(csv.str());
    std::getline(lines, header);
    CHECK(header == "layer,name,out_channels,params,macs");
}

TEST_CASE("build_generator wiring") {
    const auto p = build_generator<double>(gen(1, 8, 16), 1);
    CHECK(p.size() == 36);
    CHECK(p.norm_stats().size() == 8);

    const auto q = build_generator<double>(gen(2, 4, 16), 1);
    int compressors = 0;
    for (const auto& e : q.entries())
        if (e.name.find("compress.weight") != std::string::npos) ++compressors;
    CHECK(compressors == 1);
    CHECK(q.at("block2.compress.weight").shape() == Shape{32, 96, 1, 1, 1});
    CHECK(q.at("recon.weight").shape() == Shape{1, 192, 1, 1, 1});

    const auto a = build_generator<double>(gen(2, 2, 4), 42);
    const auto b = build_generator<double>(gen(2, 2, 4), 42);
    const auto c = build_generator<double>(gen(2, 2, 4), 43);
    bool differs = false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a.entries()[i].value.to_vector() == b.entries()[i].value.to_vector());
        differs = differs || a.entries()[i].value.to_vector() != c.entries()[i].value.to_vector();
    }
    CHECK(differs);

    SUBCASE("He initialization scale") {
        const auto big = build_generator<double>(gen(1, 4, 16), 9);
        const auto w = big.at("block1.unit4.conv.weight").to_vector();
        double sq = 0.0;
        for (double v : w) sq += v * v;
        const double expected = 2.0 / (80.0 * 27.0);
        CHECK(std::abs(sq / static_cast<double>(w.size()) / expected - 1.0) < 0.05);
    }
}

TEST_CASE("generator_forward") {
    SUBCASE("shape is preserved") {
        auto p = build_generator<double>(gen(2, 2, 4), 1);
        CHECK(generator_forward(p, random_tensor(Shape{2, 1, 16, 16, 16}, 2)).shape() == Shape{2, 1, 16, 16, 16});
        CHECK(generator_forward(p, random_tensor(Shape{1, 1, 8, 9, 10}, 3)).shape() == Shape{1, 1, 8, 9, 10});
        auto big = build_generator<float>(gen(4, 4, 16), 1);
        CHECK(generator_forward(big, random_tensor<float>(Shape{1, 1, 8, 8, 8}, 4)).shape() == Shape{1, 1, 8, 8, 8});
        CHECK_THROWS_AS(generator_forward(p, random_tensor(Shape{1, 2, 8, 8, 8}, 3)), ad::ShapeError);
    }
    SUBCASE("all-zero parameters give the reconstruction bias") {
        auto p = build_generator<double>(gen(2, 2, 4), 1);
        auto z = zeroed(p);
        z.set("recon.bias", Tensor<double>(Shape{1}, {0.375}));
        auto y = generator_forward(z, random_tensor(Shape{2, 1, 8, 8, 8}, 5), NormUse::batch_only);
        for (double v : y.to_vector()) CHECK(v == 0.375);
    }
    SUBCASE("hand-composed b1u1 k1 oracle") {
        auto cfg = gen(1, 1, 1);
        auto p = build_generator<double>(cfg, 0);
        // Hand-set values, independent of the initializer.
        const auto w0 = testutil::uniform_values(2 * 27, 101);
        const std::vector<double> b0{0.1, -0.2};
        const std::vector<double> gain{1.5, 0.5}, beta{0.25, -0.5};
        const auto w1 = testutil::uniform_values(2 * 27, 102);
        const std::vector<double> b1{0.05};
        const std::vector<double> wr{0.3, -0.7, 1.1}, br{0.01};
        p.set("init.conv.weight", Tensor<double>(Shape{2, 1, 3, 3, 3}, w0));
        p.set("init.conv.bias", Tensor<double>(Shape{2}, b0));
        p.set("block1.unit1.norm.gain", Tensor<double>(Shape{2}, gain));
        p.set("block1.unit1.norm.bias", Tensor<double>(Shape{2}, beta));
        p.set("block1.unit1.conv.weight", Tensor<double>(Shape{1, 2, 3, 3, 3}, w1));
        p.set("block1.unit1.conv.bias", Tensor<double>(Shape{1}, b1));
        p.set("recon.weight", Tensor<double>(Shape{1, 3, 1, 1, 1}, wr));
        p.set("recon.bias", Tensor<double>(Shape{1}, br));
        const auto x = testutil::uniform_values(27, 103);

        std::vector<std::int64_t> os;
        auto f = testutil::naive_conv3d(x, {1, 1, 3, 3, 3}, w0, {2, 1, 3, 3, 3}, 1, true, os);
        for (int c = 0; c < 2; ++c)
            for (int i = 0; i < 27; ++i) f[static_cast<std::size_t>(c * 27 + i)] += b0[static_cast<std::size_t>(c)];
        std::vector<double> h(f.size());
        for (int c = 0; c < 2; ++c) {
            double m = 0.0, v = 0.0;
            for (int i = 0; i < 27; ++i) m += f[static_cast<std::size_t>(c * 27 + i)];
            m /= 27.0;
            for (int i = 0; i < 27; ++i) v += std::pow(f[static_cast<std::size_t>(c * 27 + i)] - m, 2);
            v /= 27.0;
            for (int i = 0; i < 27; ++i) {
                const auto k = static_cast<std::size_t>(c * 27 + i);
                const double n = gain[static_cast<std::size_t>(c)] * (f[k] - m) / std::sqrt(v + 1e-5) +
                                 beta[static_cast<std::size_t>(c)];
                h[k] = n > 0 ? n : std::expm1(n);
            }
        }
        auto g = testutil::naive_conv3d(h, {1, 2, 3, 3, 3}, w1, {1, 2, 3, 3, 3}, 1, true, os);
        std::vector<double> expected(27);
        for (std::size_t i = 0; i < 27; ++i) {
            expected[i] = wr[0] * f[i] + wr[1] * f[27 + i] + wr[2] * (g[i] + b1[0]) + br[0];
        }
        auto y = generator_forward(p, Tensor<double>(Shape{1, 1, 3, 3, 3}, x), NormUse::batch_only);
        CHECK(testutil::max_abs_diff(y.to_vector(), expected) < 1e-12);
    }
    SUBCASE("norm modes") {
        auto p = build_generator<double>(gen(1, 2, 4), 1);
        auto x = random_tensor(Shape{2, 1, 6, 6, 6}, 7);
        CHECK_THROWS_AS(generator_forward(p, x, NormUse::eval), ad::GraphError);
        (void)generator_forward(p, x, NormUse::batch_only);
        CHECK(!p.stats_populated());
        (void)generator_forward(p, x, NormUse::train);
        CHECK(p.stats_populated());
        CHECK(generator_forward(p, x, NormUse::eval).shape() == x.shape());
        const ModelParams<double>& cp = p;
        CHECK_THROWS_AS(generator_forward(cp, x, NormUse::train), std::invalid_argument);
    }
}

TEST_CASE("generator gradients") {
    SUBCASE("every parameter receives a finite gradient; the first conv a non-zero one") {
        for (const char* arch : {"b1u2:k4", "b2u2:k4", "b2u4:k4:nonorm"}) {
            auto p = build_generator<double>(parse_generator(arch), 11);
            p.set_requires_grad(true);
            auto x = random_tensor(Shape{2, 1, 6, 6, 6}, 12);
            auto hr = random_tensor(Shape{2, 1, 6, 6, 6}, 13);
            auto grads = ad::backward(ad::mean(ad::abs(ad::sub(generator_forward(p, x), hr))));
            for (const auto& e : p.entries()) {
                REQUIRE(grads.contains(e.value));
                double sq = 0.0;
                for (double v : grads.at(e.value).to_vector()) sq += v * v;
                CHECK(std::isfinite(sq));
                if (e.name == "init.conv.weight") CHECK(sq > 0.0);
            }
        }
    }
    SUBCASE("b1u2 k4 against finite differences") {
        auto p = build_generator<double>(parse_generator("b1u2:k4"), 21);
        // Non-trivial norm parameters so their gradients are exercised.
        p.set("block1.unit1.norm.gain", random_tensor(Shape{8}, 22, 0.5, 1.5));
        p.set("block1.unit2.norm.bias", random_tensor(Shape{12}, 23, -0.5, 0.5));
        const auto x = random_tensor(Shape{2, 1, 5, 5, 5}, 24);
        const auto probe = random_tensor(Shape{2, 1, 5, 5, 5}, 25);
        auto loss = [&](const ModelParams<double>& q, const Tensor<double>& in) {
            return ad::mean(ad::mul(generator_forward(q, in, NormUse::batch_only), probe));
        };
        p.set_requires_grad(true);
        auto xg = x.detach();
        xg.set_requires_grad();
        const auto base = p;
        auto grads = ad::backward(loss(base, xg));
        for (std::size_t i = 0; i < base.size(); ++i) {
            const auto& e = base.entries()[i];
            auto numeric = ad::finite_difference_gradient<double>(
                [&](const Tensor<double>& v) {
                    auto q = base;
                    q.set(i, v);
                    return loss(q, x).item();
                },
                e.value.detach(), 1e-6);
            CAPTURE(e.name);
            CHECK(ad::relative_error(grads.at(e.value), numeric) < 1e-4);
        }
        auto numeric_x = ad::finite_difference_gradient<double>(
            [&](const Tensor<double>& v) { return loss(base, v).item(); }, x, 1e-6);
        CHECK(ad::relative_error(grads.at(xg), numeric_x) < 1e-4);
    }
}

TEST_CASE("discriminator") {
    SUBCASE("default config on 32^3 gives one score per item") {
        const auto p = build_discriminator<float>(DiscriminatorConfig{}, 1);
        auto s = discriminator_forward(p, random_tensor<float>(Shape{2, 1, 32, 32, 32}, 2));
        CHECK(s.shape() == Shape{2});
        for (float v : s.to_vector()) CHECK(std::isfinite(v));
    }
    SUBCASE("layout follows the SRGAN critic") {
        const auto p = build_discriminator<double>(DiscriminatorConfig{}, 1);
        CHECK_THROWS_AS((void)p.at("conv0.norm.gain"), std::out_of_range);
        CHECK(p.at("conv0.weight").shape() == Shape{64, 1, 3, 3, 3});
        CHECK(p.at("stage4.down.weight").shape() == Shape{512, 512, 3, 3, 3});
        CHECK(p.at("dense.weight").shape() == Shape{1024, 512 * 8});
        CHECK(p.at("score.weight").shape() == Shape{1, 1024});
        CHECK(p.norm_stats().empty());
    }
    SUBCASE("zero parameters give zero scores") {
        const auto p = zeroed(build_discriminator<double>(tiny_critic(), 1));
        for (double v : discriminator_forward(p, random_tensor(Shape{3, 1, 4, 4, 4}, 2)).to_vector()) CHECK(v == 0.0);
    }
    SUBCASE("deterministic") {
        const auto p = build_discriminator<double>(tiny_critic(), 3);
        const auto q = build_discriminator<double>(tiny_critic(), 3);
        auto x = random_tensor(Shape{2, 1, 4, 4, 4}, 4);
        CHECK(discriminator_forward(p, x).to_vector() == discriminator_forward(q, x).to_vector());
    }
    SUBCASE("input gradient against finite differences") {
        const auto p = build_discriminator<double>(tiny_critic(), 5);
        auto x = random_tensor(Shape{2, 1, 4, 4, 4}, 6);
        auto xg = x.detach();
        xg.set_requires_grad();
        auto analytic = ad::grad(ad::mean(discriminator_forward(p, xg)), xg);
        auto numeric = ad::finite_difference_gradient<double>(
            [&](const Tensor<double>& v) { return ad::mean(discriminator_forward(p, v)).item(); }, x, 1e-6);
        CHECK(ad::relative_error(analytic, numeric) < 1e-4);
    }
    SUBCASE("shape errors") {
        const auto p = build_discriminator<double>(tiny_critic(), 5);
        CHECK_THROWS_AS(discriminator_forward(p, random_tensor(Shape{1, 1, 8, 8, 8}, 1)), ad::ShapeError);
        auto small = tiny_critic();
        small.patch = {2, 4, 4};
        CHECK_THROWS_AS(small.validate(), ConfigError);
    }
}

TEST_CASE("checkpoint") {
    auto p = build_generator<double>(parse_generator("b2u2:k4"), 8);
    (void)generator_forward(p, random_tensor(Shape{2, 1, 4, 4, 4}, 1));
    const auto path = temp_path("gen.ckpt");
    save_checkpoint(path, p, 1234);

    CheckpointInfo info;
    const auto q = load_checkpoint<double>(path, &info);
    CHECK(info.config == "b2u2:k4");
    CHECK(info.value_width == 8);
    CHECK(info.step == 1234);
    REQUIRE(q.size() == p.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
        CHECK(q.entries()[i].name == p.entries()[i].name);
        CHECK(q.entries()[i].value.to_vector() == p.entries()[i].value.to_vector());
    }
    for (const auto& [name, s] : p.norm_stats()) {
        CHECK(q.norm_stats().at(name).mean.to_vector() == s.mean.to_vector());
        CHECK(q.norm_stats().at(name).batches_tracked == 1);
    }

    SUBCASE("32-bit payloads") {
        const auto pf = p.cast<float>();
        save_checkpoint(temp_path("gen32.ckpt"), pf);
        const auto back = load_checkpoint<float>(temp_path("gen32.ckpt"));
        CHECK(back.at("recon.weight").to_vector() == pf.at("recon.weight").to_vector());
        CHECK(read_checkpoint_info(temp_path("gen32.ckpt")).value_width == 4);
        CHECK(std::filesystem::file_size(temp_path("gen32.ckpt")) < std::filesystem::file_size(path));
    }
    SUBCASE("critic") {
        const auto c = build_discriminator<double>(tiny_critic(), 2);
        save_checkpoint(temp_path("critic.ckpt"), c);
        const auto back = load_checkpoint<double>(temp_path("critic.ckpt"));
        CHECK(std::get<DiscriminatorConfig>(back.config()) == tiny_critic());
        CHECK(back.at("dense.weight").to_vector() == c.at("dense.weight").to_vector());
    }
    SUBCASE("corruption is detected") {
        std::string bytes;
        {
            std::ifstream in(path, std::ios::binary);
            bytes.assign(std::istreambuf_iterator<char>(in), {});
        }
        auto corrupt = bytes;
        corrupt[corrupt.size() / 2] ^= 0x5a;
        std::ofstream(temp_path("bad.ckpt"), std::ios::binary) << corrupt;
        CHECK_THROWS_AS(load_checkpoint<double>(temp_path("bad.ckpt")), CheckpointError);
        std::ofstream(temp_path("short.ckpt"), std::ios::binary) << bytes.substr(0, bytes.size() - 9);
        CHECK_THROWS_AS(load_checkpoint<double>(temp_path("short.ckpt")), CheckpointError);
        std::ofstream(temp_path("magic.ckpt"), std::ios::binary) << "NOTACKPT" + bytes.substr(8);
        CHECK_THROWS_AS(load_checkpoint<double>(temp_path("magic.ckpt")), CheckpointError);
        CHECK_THROWS_AS(load_checkpoint<double>(temp_path("missing.ckpt")), CheckpointError);
    }
}

TEST_CASE("receptive field") {
    CHECK(receptive_radius(parse_generator("b1u2:k4")) == 3);
    CHECK(receptive_radius(parse_generator("b2u2:k8")) == 5);
    // Measured: an impulse spreads exactly `radius` voxels through a no-norm model.
    auto cfg = parse_generator("b1u2:k4:nonorm");
    const auto p = build_generator<double>(cfg, 4);
    std::vector<double> x(15 * 15 * 15, 0.0);
    x[7 * 225 + 7 * 15 + 7] = 1.0;
    auto zero_out = generator_forward(p, Tensor<double>::zeros(Shape{1, 1, 15, 15, 15}), NormUse::batch_only);
    auto y = generator_forward(p, Tensor<double>(Shape{1, 1, 15, 15, 15}, x), NormUse::batch_only);
    int reach = 0;
    for (int i = 0; i < 15; ++i) {
        const auto k = static_cast<std::size_t>(7 * 225 + 7 * 15 + i);
        if (y[static_cast<std::int64_t>(k)] != zero_out[static_cast<std::int64_t>(k)]) reach = std::max(reach, std::abs(i - 7));
    }
    CHECK(reach == receptive_radius(cfg));
}
