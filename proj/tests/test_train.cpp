#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "test_util.hpp"
#include "voxelsr/io/dataset.hpp"
#include "voxelsr/models/checkpoint.hpp"
#include "voxelsr/train/gradcheck.hpp"
#include "voxelsr/train/infer.hpp"
#include "voxelsr/train/trainer.hpp"

using namespace voxelsr;
using train::TrainConfig;

namespace {

std::vector<Volume> phantoms(int count, std::uint64_t seed, Extent3 shape = {16, 16, 16}) {
    std::vector<Volume> out;
    for (int i = 0; i < count; ++i) {
        auto v = io::synth_phantom(shape, seed + static_cast<std::uint64_t>(i), io::PhantomRecipe::blobs_plus_tubes);
        v.subject_id = "p" + std::to_string(i);
        out.push_back(std::move(v));
    }
    return out;
}

models::GeneratorConfig small_generator() {
    models::GeneratorConfig g;
    g.blocks = 1;
    g.units = 2;
    g.growth = 4;
    return g;
}

TrainConfig toy_config() {
    TrainConfig c;
    c.patch = {8, 8, 8};
    c.pretrain_steps = 6;
    c.log_wall_time = false;
    c.seed = 11;
    c.critic.base_width = 4;
    c.critic.stages = 2;
    c.critic.dense_width = 8;
    return c;
}

std::vector<std::string> lines(const std::filesystem::path& p) {
    std::ifstream in(p);
    std::vector<std::string> out;
    for (std::string l; std::getline(in, l);) out.push_back(l);
    return out;
}

}  // namespace

TEST_CASE("TrainConfig") {
    SUBCASE("defaults follow the published settings") {
        TrainConfig c;
        CHECK(c.lambda_gan == 0.001);
        CHECK(c.lambda_gp == 10.0);
        CHECK(c.lr_pretrain == 1e-4);
        CHECK(c.lr_gan == 5e-6);
        CHECK(c.batch_size == 2);
        CHECK(c.schedule.critic_warmup_steps == 10000);
        CHECK(c.schedule.critic_per_gen == 7);
        CHECK(c.patch == Extent3{32, 32, 32});
    }
    SUBCASE("JSON roundtrip") {
        auto c = toy_config();
        c.gan_steps = 40;
        c.flips = patch::flip_h | patch::flip_w;
        c.seed = 0xfedcba9876543210ULL;
        c.schedule.critic_warmup_steps = 12;
        const auto back = TrainConfig::from_json(c.to_json());
        CHECK(back.to_json() == c.to_json());
        CHECK(back.seed == c.seed);
        CHECK(back.flips == c.flips);
    }
    SUBCASE("partial JSON keeps defaults") {
        const auto c = TrainConfig::from_json(R"({"pretrain_steps": 5, "schedule": {"critic_per_gen": 3}})");
        CHECK(c.pretrain_steps == 5);
        CHECK(c.schedule.critic_per_gen == 3);
        CHECK(c.schedule.critic_warmup_steps == 10000);
        CHECK(c.lr_pretrain == 1e-4);
    }
    SUBCASE("rejections") {
        CHECK_THROWS_AS((void)TrainConfig::from_json(R"({"learning_rate": 1})"), train::TrainError);
        CHECK_THROWS_AS((void)TrainConfig::from_json(R"({"adam": {"beta3": 1}})"), train::TrainError);
        CHECK_THROWS_AS((void)TrainConfig::from_json(R"({"lr_gan": 0})"), train::TrainError);
        CHECK_THROWS_AS((void)TrainConfig::from_json(R"({"lambda_gan": -1})"), train::TrainError);
        CHECK_THROWS_AS((void)TrainConfig::from_json(R"({"batch_size": "two"})"), train::TrainError);
        CHECK_THROWS_AS((void)TrainConfig::from_json(R"({"flips": "x"})"), train::TrainError);
        CHECK_THROWS_AS((void)TrainConfig::from_json("[1, 2]"), train::TrainError);
        CHECK_THROWS((void)TrainConfig::from_json(R"({"schedule": {"critic_per_gen": 0}})"));
    }
}

TEST_CASE("PatchSampler") {
    // lr = 2 * hr + subject index, so alignment and subject identity are both visible.
    auto hr = phantoms(3, 5, {16, 18, 20});
    std::vector<train::SubjectPair> data;
    for (std::size_t s = 0; s < hr.size(); ++s) {
        Volume lr = hr[s];
        for (auto& v : lr.data) v = 2.0 * v + static_cast<double>(s);
        data.push_back({lr, hr[s]});
    }
    train::PatchSampler a(data, {4, 5, 6}, 3, patch::flip_all);
    train::PatchSampler b(data, {4, 5, 6}, 3, patch::flip_all);
    std::vector<int> seen;
    for (int round = 0; round < 4; ++round) {
        auto ba = a.next(3);
        auto bb = b.next(3);
        REQUIRE(ba.lr.size() == 3);
        for (std::size_t i = 0; i < 3; ++i) {
            CHECK(ba.lr[i].data == bb.lr[i].data);
            CHECK(ba.hr[i].shape == Extent3{4, 5, 6});
            const double subject = ba.lr[i].data[0] - 2.0 * ba.hr[i].data[0];
            for (std::size_t k = 0; k < ba.lr[i].data.size(); ++k) {
                CHECK(ba.lr[i].data[k] == doctest::Approx(2.0 * ba.hr[i].data[k] + subject).epsilon(1e-12));
            }
            seen.push_back(static_cast<int>(std::lround(subject)));
        }
    }
    // Each epoch of three draws visits every subject once.
    for (std::size_t e = 0; e < 4; ++e) {
        std::vector<int> epoch(seen.begin() + static_cast<std::ptrdiff_t>(3 * e),
                               seen.begin() + static_cast<std::ptrdiff_t>(3 * e + 3));
        std::sort(epoch.begin(), epoch.end());
        CHECK(epoch == std::vector<int>{0, 1, 2});
    }
    CHECK(a.epoch() == 3);
    CHECK_THROWS_AS(train::PatchSampler(data, {17, 5, 6}, 0, patch::flip_all), train::TrainError);
    CHECK_THROWS_AS(train::PatchSampler({}, {4, 4, 4}, 0, patch::flip_all), train::TrainError);
}

TEST_CASE("pretraining") {
    const auto train_set = train::make_pairs(phantoms(4, 100), {1, 2, 2});
    const auto val_set = train::make_pairs(phantoms(2, 200), {1, 2, 2});
    auto cfg = toy_config();
    cfg.validate_every = 3;
    cfg.checkpoint_every = 4;

    SUBCASE("gan_steps = 0 is plain L1 training") {
        auto r = train::train<double>(cfg, models::build_generator<double>(small_generator(), 1), std::nullopt,
                                      train_set, val_set);
        CHECK_FALSE(r.critic.has_value());
        REQUIRE(r.steps.size() == 6);
        for (std::size_t i = 0; i < r.steps.size(); ++i) {
            const auto& s = r.steps[i];
            CHECK(s.step == static_cast<std::int64_t>(i + 1));
            CHECK(s.phase == "pretrain");
            CHECK(s.action == "generator_step");
            CHECK(std::isfinite(s.l1));
            CHECK(std::isnan(s.loss_gan));
            CHECK(std::isnan(s.penalty));
            CHECK(s.lr == 1e-4);
            CHECK(std::isnan(s.wall_ms));
        }
        REQUIRE(r.validation.size() == 3);
        CHECK(r.validation[0].step == 0);
        CHECK(r.validation[1].step == 3);
        CHECK(r.validation[2].step == 6);
        const auto direct = train::validate(r.generator, val_set);
        CHECK(direct.l1 == r.validation.back().l1);
        CHECK(direct.nrmse == r.validation.back().nrmse);
    }

    SUBCASE("identical config and seed give identical logs and files") {
        testutil::TempDir d1, d2;
        auto run = [&](const testutil::TempDir& d) {
            train::TrainSink sink;
            sink.out_dir = d.path;
            return train::train<double>(cfg, models::build_generator<double>(small_generator(), 1), std::nullopt,
                                        train_set, val_set, sink);
        };
        auto r1 = run(d1);
        auto r2 = run(d2);
        const auto m1 = lines(d1.path / "metrics.csv");
        CHECK(m1 == lines(d2.path / "metrics.csv"));
        CHECK(lines(d1.path / "validation.csv") == lines(d2.path / "validation.csv"));
        REQUIRE(m1.size() == 7);
        CHECK(m1[0] == train::metrics_header);
        CHECK(m1[1] == train::csv_line(r1.steps[0]));
        for (const char* name : {"4.ckpt", "6.ckpt", "final.ckpt"}) CHECK(std::filesystem::exists(d1.path / "checkpoints" / name));
        CHECK_FALSE(std::filesystem::exists(d1.path / "checkpoints" / "3.ckpt"));
        models::CheckpointInfo info;
        auto loaded = models::load_checkpoint<double>(d1.path / "checkpoints" / "final.ckpt", &info);
        CHECK(info.step == 6);
        for (std::size_t i = 0; i < loaded.size(); ++i) {
            CHECK(loaded.entries()[i].value.to_vector() == r2.generator.entries()[i].value.to_vector());
        }
    }

    SUBCASE("a different seed gives a different trajectory") {
        auto other = cfg;
        other.seed = 12;
        auto a = train::train<double>(cfg, models::build_generator<double>(small_generator(), 1), std::nullopt,
                                      train_set, {});
        auto b = train::train<double>(other, models::build_generator<double>(small_generator(), 1), std::nullopt,
                                      train_set, {});
        CHECK(a.steps[0].l1 != b.steps[0].l1);
        CHECK(a.validation.empty());
    }

    SUBCASE("a non-finite loss aborts with a diagnostic checkpoint") {
        testutil::TempDir d;
        train::TrainSink sink;
        sink.out_dir = d.path;
        auto bad = cfg;
        bad.lr_pretrain = 1e38;
        bad.pretrain_steps = 20;
        try {
            (void)train::train<float>(bad, models::build_generator<float>(small_generator(), 1), std::nullopt,
                                      train_set, {}, sink);
            FAIL("expected NumericalError");
        } catch (const train::NumericalError& e) {
            CHECK(e.step() > 1);
            CHECK(std::filesystem::exists(e.checkpoint()));
            CHECK(e.checkpoint().filename() == std::to_string(e.step()) + ".nonfinite.ckpt");
            CHECK(std::string(e.what()).find("l1 loss") != std::string::npos);
            // Logged rows stop before the failing step.
            CHECK(lines(d.path / "metrics.csv").size() == static_cast<std::size_t>(e.step()));
        }
    }
}

TEST_CASE("GAN phase") {
    const auto train_set = train::make_pairs(phantoms(4, 300), {1, 2, 2});
    auto cfg = toy_config();
    cfg.pretrain_steps = 2;
    cfg.gan_steps = 30;
    cfg.schedule = {5, 3, 10, 4};

    SUBCASE("actions follow schedule_next and only the right model moves") {
        testutil::TempDir d;
        train::TrainSink sink;
        sink.out_dir = d.path;
        auto r = train::train<double>(cfg, models::build_generator<double>(small_generator(), 2), std::nullopt,
                                      train_set, {}, sink);
        REQUIRE(r.steps.size() == 32);
        train::GanSchedule s;
        for (std::size_t i = 2; i < r.steps.size(); ++i) {
            const auto n = train::schedule_next(s, cfg.schedule);
            s = n.next;
            const auto& row = r.steps[i];
            CHECK(row.action == train::to_string(n.action));
            CHECK(row.phase == train::to_string(n.phase));
            CHECK(row.lr == cfg.lr_gan);
            CHECK(std::isfinite(row.em_estimate));
            if (n.action == train::Action::critic_step) {
                CHECK(row.penalty >= 0.0);
                CHECK(std::isnan(row.loss_gan));
            } else {
                CHECK(std::isfinite(row.loss_gan));
                CHECK(std::isnan(row.penalty));
            }
        }
        REQUIRE(r.critic.has_value());
        CHECK(std::filesystem::exists(d.path / "checkpoints" / "32.critic.ckpt"));
        CHECK(std::filesystem::exists(d.path / "checkpoints" / "final.critic.ckpt"));
        CHECK_FALSE(std::filesystem::exists(d.path / "checkpoints" / "2.critic.ckpt"));
    }

    SUBCASE("warmup leaves the generator untouched") {
        auto warm = cfg;
        warm.pretrain_steps = 0;
        warm.gan_steps = 5;
        const auto g0 = models::build_generator<double>(small_generator(), 2);
        auto r = train::train<double>(warm, g0, std::nullopt, train_set, {});
        for (std::size_t i = 0; i < g0.size(); ++i) {
            CHECK(r.generator.entries()[i].value.to_vector() == g0.entries()[i].value.to_vector());
        }
        const auto c0 = models::build_discriminator<double>([&] {
            auto c = warm.critic;
            c.patch = warm.patch;
            return c;
        }(), warm.seed + 1);
        bool moved = false;
        for (std::size_t i = 0; i < c0.size(); ++i) {
            moved = moved || r.critic->entries()[i].value.to_vector() != c0.entries()[i].value.to_vector();
        }
        CHECK(moved);
    }

    SUBCASE("critic patch must match the training patch") {
        auto c = cfg.critic;
        c.patch = {16, 16, 16};
        CHECK_THROWS_AS((void)train::train<double>(cfg, models::build_generator<double>(small_generator(), 2),
                                                   models::build_discriminator<double>(c, 1), train_set, {}),
                        train::TrainError);
    }
}

TEST_CASE("critic warmup raises the EM estimate on a fixed generator") {
    // Toy run: three 500-step averages of the EM estimate never decrease.
    const auto train_set = train::make_pairs(phantoms(6, 400), {1, 2, 2});
    auto cfg = toy_config();
    cfg.pretrain_steps = 0;
    cfg.gan_steps = 1500;
    cfg.schedule.critic_warmup_steps = 1500;
    cfg.lr_gan = 1e-4;
    auto r = train::train<float>(cfg, models::build_generator<float>(small_generator(), 3), std::nullopt, train_set,
                                 {});
    std::vector<double> avg(3, 0.0);
    for (std::size_t i = 0; i < r.steps.size(); ++i) {
        REQUIRE(r.steps[i].phase == "critic_warmup");
        avg[i / 500] += r.steps[i].em_estimate / 500.0;
    }
    MESSAGE("EM averages " << avg[0] << " " << avg[1] << " " << avg[2]);
    CHECK(avg[1] >= avg[0]);
    CHECK(avg[2] >= avg[1]);
}

TEST_CASE("super_resolve") {
    auto g = models::build_generator<double>(small_generator(), 4);
    const auto lr = phantoms(1, 500, {20, 18, 22})[0];
    // Populate running statistics so inference does not depend on the grouping.
    for (int i = 0; i < 3; ++i) {
        const std::vector<Volume> one{lr};
        (void)models::generator_forward(g, train::to_batch<double>(one), models::NormUse::train);
    }
    REQUIRE(g.stats_populated());
    train::InferOptions whole;
    whole.patch = lr.shape;
    whole.margin = 0;
    train::InferReport report;
    const auto ref = train::super_resolve(g, lr, whole, &report);
    CHECK(ref.shape == lr.shape);
    CHECK(report.patches == 1);
    CHECK(report.norm == models::NormUse::eval);

    // Receptive radius 3 <= margin 3: patch inference matches whole-volume inference.
    CHECK(models::receptive_radius(small_generator()) == 3);
    for (std::int64_t p : {10, 12, 16}) {
        for (int batch : {1, 3}) {
            train::InferOptions opt;
            opt.patch = {p, p, p};
            opt.batch = batch;
            const auto sr = train::super_resolve(g, lr, opt, &report);
            CHECK(report.patches > 1);
            CHECK(testutil::max_abs_diff(sr.data, ref.data) < 1e-12);
        }
    }
    train::InferOptions too_big;
    too_big.patch = {32, 32, 32};
    CHECK_THROWS_AS((void)train::super_resolve(g, lr, too_big), VolumeError);
}

TEST_CASE("gradient check suite passes on sampled coordinates") {
    const auto cases = train::run_gradcheck(train::GradcheckSize::small);
    CHECK(cases.size() >= 14);
    for (const auto& c : cases) {
        INFO(c.name << " error " << c.error);
        CHECK(c.coordinates > 0);
        CHECK(c.passed());
    }
}
