#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include "test_util.hpp"
#include "voxelsr/io/raw.hpp"

using namespace voxelsr;
namespace fs = std::filesystem;

namespace {

const fs::path source_dir = VOXELSR_SOURCE_DIR;

// Runs the binary through the shell with output captured to log; returns the exit code.
int voxelsr_cli(const std::string& args, const fs::path& log) {
    const std::string cmd = std::string("\"") + VOXELSR_BIN + "\" " + args + " > \"" + log.string() + "\" 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

double max_abs_diff(const Volume& a, const Volume& b) {
    REQUIRE(a.shape == b.shape);
    double d = 0;
    for (std::size_t i = 0; i < a.data.size(); ++i) d = std::max(d, std::abs(a.data[i] - b.data[i]));
    return d;
}

double mean_abs_diff(const Volume& a, const Volume& b) {
    REQUIRE(a.shape == b.shape);
    double d = 0;
    for (std::size_t i = 0; i < a.data.size(); ++i) d += std::abs(a.data[i] - b.data[i]);
    return d / static_cast<double>(a.data.size());
}

std::string q(const fs::path& p) { return "\"" + p.string() + "\""; }

}  // namespace

TEST_CASE("degrade with unit factors returns the input") {
    testutil::TempDir tmp;
    const auto log = tmp.path / "log.txt";
    REQUIRE(voxelsr_cli("degrade --phantoms 2 --shape 16,18,20 --seed 5 --factors 1,1,1 --format vol --out " +
                            q(tmp.path / "d"),
                        log) == 0);
    for (const char* id : {"phantom000", "phantom001"}) {
        const auto hr = io::read_volume(tmp.path / "d/volumes/hr" / (std::string(id) + ".vol"));
        const auto lr = io::read_volume(tmp.path / "d/volumes/lr" / (std::string(id) + ".vol"));
        CHECK(max_abs_diff(hr, lr) <= 1e-6);
    }
    CHECK(fs::exists(tmp.path / "d/manifest.json"));
}

TEST_CASE("degrade scales loaded volumes to the unit range by default") {
    testutil::TempDir tmp;
    const auto log = tmp.path / "log.txt";
    Volume v({16, 16, 16});
    for (std::size_t i = 0; i < v.data.size(); ++i) v.data[i] = 50.0 + static_cast<double>(i % 151);
    v.subject_id = "scan";
    io::write_volume(v, tmp.path / "in/scan.vol");
    REQUIRE(voxelsr_cli("degrade --input " + q(tmp.path / "in") + " --format vol --out " + q(tmp.path / "d"), log) == 0);
    const auto hr = io::read_volume(tmp.path / "d/volumes/hr/scan.vol");
    CHECK(*std::min_element(hr.data.begin(), hr.data.end()) == 0.0);
    CHECK(*std::max_element(hr.data.begin(), hr.data.end()) == 1.0);
    CHECK(slurp(tmp.path / "d/manifest.json").find("\"minmax\"") != std::string::npos);
    REQUIRE(voxelsr_cli("degrade --input " + q(tmp.path / "in") + " --normalize none --format vol --out " +
                            q(tmp.path / "n"),
                        log) == 0);
    CHECK(max_abs_diff(io::read_volume(tmp.path / "n/volumes/hr/scan.vol"), v) == 0.0);
}

TEST_CASE("usage errors exit with code 2") {
    testutil::TempDir tmp;
    const auto log = tmp.path / "log.txt";
    CHECK(voxelsr_cli("degrade --input " + q(tmp.path / "missing.nii") + " --out " + q(tmp.path / "o"), log) == 2);
    CHECK(slurp(log).find("missing.nii") != std::string::npos);
    CHECK(voxelsr_cli("summarize --arch b0u4", log) == 2);
    CHECK(voxelsr_cli("frobnicate", log) == 2);
    CHECK(voxelsr_cli("train --config " + q(source_dir / "configs/toy.json") + " --phase gan --out " + q(tmp.path / "g"),
                      log) == 2);
    CHECK(slurp(log).find("--init") != std::string::npos);
}

TEST_CASE("train, infer, evaluate and replay on the toy config") {
    testutil::TempDir tmp;
    const auto log = tmp.path / "log.txt";
    const auto config = q(source_dir / "configs/toy.json");
    REQUIRE(voxelsr_cli("train --config " + config + " --out " + q(tmp.path / "a"), log) == 0);
    REQUIRE(voxelsr_cli("train --config " + config + " --out " + q(tmp.path / "b"), log) == 0);
    // Same seeds, same bytes.
    const auto metrics = slurp(tmp.path / "a/metrics.csv");
    CHECK(!metrics.empty());
    CHECK(metrics == slurp(tmp.path / "b/metrics.csv"));
    CHECK(slurp(tmp.path / "a/validation.csv") == slurp(tmp.path / "b/validation.csv"));

    const auto model = tmp.path / "a/checkpoints/final.ckpt";
    REQUIRE(fs::exists(model));
    REQUIRE(voxelsr_cli("degrade --phantoms 2 --shape 24,24,24 --seed 300 --format vol --out " + q(tmp.path / "d"), log) == 0);

    SUBCASE("patch size does not change the output beyond rounding") {
        const auto in = q(tmp.path / "d/volumes/lr");
        REQUIRE(voxelsr_cli("infer --model " + q(model) + " --input " + in + " --patch 16 --format vol --out " +
                                q(tmp.path / "p16"),
                            log) == 0);
        REQUIRE(voxelsr_cli("infer --model " + q(model) + " --input " + in + " --patch 24 --format vol --out " +
                                q(tmp.path / "p24"),
                            log) == 0);
        const auto a = io::read_volume(tmp.path / "p16/volumes/sr/phantom000.vol");
        const auto b = io::read_volume(tmp.path / "p24/volumes/sr/phantom000.vol");
        CHECK(mean_abs_diff(a, b) < 1e-5);
        CHECK(voxelsr_cli("infer --model " + q(model) + " --input " + in + " --patch 32 --out " + q(tmp.path / "p32"),
                          log) == 2);
    }

    SUBCASE("evaluate against itself is perfect") {
        const auto hr = q(tmp.path / "d/volumes/hr");
        REQUIRE(voxelsr_cli("evaluate --ref " + hr + " --test " + hr + " --out " + q(tmp.path / "e"), log) == 0);
        const auto csv = slurp(tmp.path / "e/metrics.csv");
        CHECK(csv.rfind("subject_id,", 0) == 0);
        CHECK(csv.find("\nmean,") != std::string::npos);
        CHECK(csv.find("\nstd,") != std::string::npos);
        CHECK(csv.find("phantom000,1,inf,0") != std::string::npos);
        const auto table = slurp(tmp.path / "e/table.csv");
        CHECK(table.rfind("config,ssim_mean,ssim_std,psnr_mean,psnr_std,nrmse_mean,nrmse_std,params,macs,time_s", 0) == 0);
        CHECK(voxelsr_cli("evaluate --ref " + hr + " --test " + q(tmp.path / "d/volumes/lr") + " --out " +
                              q(tmp.path / "e2"),
                          log) == 0);
    }

    SUBCASE("replay reproduces the recorded artifacts") {
        REQUIRE(voxelsr_cli("--replay " + q(tmp.path / "a/manifest.json") + " --out " + q(tmp.path / "r"), log) == 0);
        CHECK(slurp(log).find("0 differ") != std::string::npos);
        CHECK(slurp(tmp.path / "r/metrics.csv") == metrics);
    }
}

TEST_CASE("split writes the 780/111/111/111 partition") {
    testutil::TempDir tmp;
    const auto log = tmp.path / "log.txt";
    {
        std::ofstream ids(tmp.path / "ids.txt");
        for (int i = 0; i < 1113; ++i) ids << "subject" << i << '\n';
    }
    REQUIRE(voxelsr_cli("split --ids " + q(tmp.path / "ids.txt") + " --seed 3 --out " + q(tmp.path / "s"), log) == 0);
    const auto json = slurp(tmp.path / "s/split.json");
    auto count = [&](const std::string& key) {
        const auto start = json.find("\"" + key + "\"");
        REQUIRE(start != std::string::npos);
        const auto open = json.find('[', start), close = json.find(']', open);
        const auto body = json.substr(open, close - open);
        return std::count(body.begin(), body.end(), ',') + 1;
    };
    CHECK(count("train") == 780);
    CHECK(count("validation") == 111);
    CHECK(count("evaluation") == 111);
    CHECK(count("test") == 111);
}

TEST_CASE("gradcheck and summarize succeed") {
    testutil::TempDir tmp;
    const auto log = tmp.path / "log.txt";
    CHECK(voxelsr_cli("gradcheck --size small --out " + q(tmp.path / "g"), log) == 0);
    CHECK(fs::exists(tmp.path / "g/gradcheck.csv"));
    CHECK(voxelsr_cli("summarize --arch b4u4", log) == 0);
    CHECK(slurp(log).find("408,929") != std::string::npos);
}
