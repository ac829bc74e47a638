#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <numbers>

#include "oracles.hpp"
#include "test_util.hpp"
#include "voxelsr/kspace/kspace.hpp"

using namespace voxelsr;
using namespace voxelsr::kspace;

using oracle::cosine_y;
using oracle::correlation;
using oracle::direct_dft;
using oracle::random_volume;

namespace {

double max_abs(const std::vector<double>& v) {
    double m = 0;
    for (double e : v) m = std::max(m, std::abs(e));
    return m;
}

double energy(const std::vector<double>& v) {
    double e = 0;
    for (double x : v) e += x * x;
    return e;
}

}  // namespace

TEST_CASE("1D fft matches the direct transform") {
    for (std::size_t n : {1u, 2u, 3u, 4u, 5u, 7u, 8u, 12u, 15u, 16u, 17u, 31u, 64u, 100u, 127u}) {
        const auto re = testutil::uniform_values(n, 100 + n);
        const auto im = testutil::uniform_values(n, 200 + n);
        std::vector<Complex> x(n);
        for (std::size_t i = 0; i < n; ++i) x[i] = {re[i], im[i]};
        for (bool inverse : {false, true}) {
            auto ref = direct_dft(x, inverse);
            auto got = x;
            fft(got, inverse);
            double err = 0.0;
            for (std::size_t i = 0; i < n; ++i) err = std::max(err, std::abs(got[i] - ref[i]));
            CAPTURE(n);
            CHECK(err < 1e-11 * static_cast<double>(n));
        }
    }
}

TEST_CASE("dft3") {
    SUBCASE("constant volume has a single DC bin at the center") {
        for (Extent3 s : {Extent3{8, 8, 8}, Extent3{5, 6, 7}}) {
            const Volume v(s, 0.75);
            const auto spectrum = dft3(v);
            const std::size_t dc = static_cast<std::size_t>(((s[0] / 2) * s[1] + s[1] / 2) * s[2] + s[2] / 2);
            for (std::size_t i = 0; i < spectrum.values.size(); ++i) {
                if (i == dc) {
                    CHECK(std::abs(spectrum.values[i] - Complex(0.75 * static_cast<double>(v.size()), 0.0)) < 1e-10);
                } else {
                    CHECK(std::abs(spectrum.values[i]) < 1e-10);
                }
            }
        }
    }
    SUBCASE("roundtrip and Parseval") {
        for (Extent3 s : {Extent3{16, 16, 16}, Extent3{15, 12, 10}, Extent3{1, 9, 4}}) {
            const auto v = random_volume(s, 5);
            for (bool centered : {true, false}) {
                const auto spectrum = dft3(v, centered);
                const auto back = idft3(spectrum);
                CHECK(testutil::max_abs_diff(back.volume.data, v.data) <= 1e-10);
                CHECK(back.max_imag < 1e-10);
                const double lhs = energy(v.data);
                const double rhs = spectral_energy(spectrum) / static_cast<double>(v.size());
                CHECK(std::abs(lhs - rhs) / lhs <= 1e-8);
            }
        }
    }
    SUBCASE("separable structure matches nested direct transforms") {
        const Extent3 s{3, 4, 5};
        const auto v = random_volume(s, 9);
        const auto spectrum = dft3(v, false);
        for (std::int64_t kz = 0; kz < 3; ++kz)
            for (std::int64_t ky = 0; ky < 4; ++ky)
                for (std::int64_t kx = 0; kx < 5; ++kx) {
                    Complex acc{};
                    for (std::int64_t z = 0; z < 3; ++z)
                        for (std::int64_t y = 0; y < 4; ++y)
                            for (std::int64_t x = 0; x < 5; ++x) {
                                const double ang = -2.0 * std::numbers::pi *
                                                   (static_cast<double>(kz * z) / 3.0 + static_cast<double>(ky * y) / 4.0 +
                                                    static_cast<double>(kx * x) / 5.0);
                                acc += v.at(z, y, x) * Complex(std::cos(ang), std::sin(ang));
                            }
                    CHECK(std::abs(spectrum.values[static_cast<std::size_t>((kz * 4 + ky) * 5 + kx)] - acc) < 1e-12);
                }
    }
}

TEST_CASE("idft3") {
    Spectrum s;
    s.shape = {4, 4, 4};
    s.values.assign(64, Complex{});
    s.values[static_cast<std::size_t>((2 * 4 + 2) * 4 + 2)] = 64.0;
    const auto r = idft3(s);
    for (double v : r.volume.data) CHECK(v == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(r.max_imag < 1e-14);

    // An asymmetric edit shows up as imaginary residue.
    s.values[static_cast<std::size_t>((2 * 4 + 2) * 4 + 3)] = Complex(0.0, 8.0);
    CHECK(idft3(s).max_imag > 1e-3);
}

TEST_CASE("truncate_kspace") {
    const auto v = random_volume({16, 16, 16}, 3);
    const auto spectrum = dft3(v);
    SUBCASE("unit factors are the identity") {
        const auto t = truncate_kspace(spectrum, {1, 1, 1});
        CHECK(t.shape == spectrum.shape);
        CHECK(t.values == spectrum.values);
    }
    SUBCASE("shape and energy") {
        const auto t = truncate_kspace(spectrum, {1, 2, 2});
        CHECK(t.shape == Extent3{16, 8, 8});
        CHECK(spectral_energy(t) <= spectral_energy(spectrum));
        const auto t3 = truncate_kspace(spectrum, {3, 3, 5});
        CHECK(t3.shape == Extent3{6, 6, 4});
    }
    SUBCASE("output stays real for even and odd kept extents") {
        for (Extent3 s : {Extent3{16, 16, 16}, Extent3{15, 13, 12}, Extent3{9, 10, 11}}) {
            const auto src = dft3(random_volume(s, 11));
            for (Factors f : {Factors{1, 2, 2}, Factors{2, 3, 2}, Factors{3, 1, 4}}) {
                const auto t = truncate_kspace(src, f);
                CHECK(idft3(t).max_imag < 1e-10);
            }
        }
    }
    SUBCASE("unpaired bin is zeroed and the window is centered on DC") {
        Spectrum s;
        s.shape = {1, 1, 8};
        for (int i = 0; i < 8; ++i) s.values.emplace_back(static_cast<double>(i + 1), 0.0);
        const auto t = truncate_kspace(s, {1, 1, 2});
        // n=8, DC at 4, m=4: window [2, 6); local 0 (frequency -2) zeroed.
        CHECK(t.values == std::vector<Complex>{0.0, 4.0, 5.0, 6.0});
        const auto odd = truncate_kspace(s, {1, 1, 3});
        // m=3: window [3, 6), symmetric about DC.
        CHECK(odd.values == std::vector<Complex>{4.0, 5.0, 6.0});
    }
    SUBCASE("constant volume reconstructs to the same value") {
        const Volume c({16, 12, 10}, 2.5);
        const auto t = truncate_kspace(dft3(c), {1, 2, 2});
        auto small = idft3(t).volume;
        const double bookkeeping = static_cast<double>(t.size()) / static_cast<double>(c.size());
        for (double x : small.data) CHECK(x * bookkeeping == doctest::Approx(2.5).epsilon(1e-12));
    }
    SUBCASE("errors") {
        CHECK_THROWS_AS((void)truncate_kspace(spectrum, {1, 17, 1}), VolumeError);
        CHECK_THROWS_AS((void)truncate_kspace(spectrum, {0, 1, 1}), VolumeError);
        CHECK_THROWS_AS((void)truncate_kspace(dft3(v, false), {1, 2, 2}), VolumeError);
    }
}

TEST_CASE("resample") {
    const auto v = random_volume({5, 6, 7}, 13);
    for (Interp k : {Interp::nearest, Interp::linear, Interp::cubic}) {
        CHECK(resample(v, v.shape, k).data == v.data);
    }
    const Volume two({1, 1, 2}, std::vector<double>{1.0, 2.0});
    CHECK(resample(two, {1, 1, 4}, Interp::nearest).data == std::vector<double>{1, 1, 2, 2});
    // align-corners false: linear 2x of [1,2] samples at -0.25, 0.25, 0.75, 1.25 (clamped).
    const auto lin = resample(two, {1, 1, 4}, Interp::linear).data;
    CHECK(testutil::max_abs_diff(lin, std::vector<double>{1.0, 1.25, 1.75, 2.0}) < 1e-15);

    SUBCASE("ramps survive a linear or cubic down/up cycle in the interior") {
        Volume ramp({4, 32, 32});
        for (std::int64_t z = 0; z < 4; ++z)
            for (std::int64_t y = 0; y < 32; ++y)
                for (std::int64_t x = 0; x < 32; ++x) ramp.at(z, y, x) = 0.1 * static_cast<double>(y) - 0.03 * static_cast<double>(x) + 0.5;
        for (Interp k : {Interp::linear, Interp::cubic}) {
            const auto back = resample(resample(ramp, {4, 16, 16}, k), ramp.shape, k);
            double err = 0.0;
            for (std::int64_t z = 0; z < 4; ++z)
                // Cubic taps of the 16-sample grid replicate edges at samples 0 and 15.
                for (std::int64_t y = 6; y < 26; ++y)
                    for (std::int64_t x = 6; x < 26; ++x) err = std::max(err, std::abs(back.at(z, y, x) - ramp.at(z, y, x)));
            CHECK(err < 1e-6);
        }
    }
    SUBCASE("cubic weights form a partition of unity") {
        const Volume c({3, 5, 4}, 1.25);
        for (double x : resample(c, {7, 9, 11}, Interp::cubic).data) CHECK(x == doctest::Approx(1.25).epsilon(1e-14));
    }
    CHECK_THROWS_AS((void)resample(v, {0, 2, 2}, Interp::linear), VolumeError);
}

TEST_CASE("lr_simulate") {
    SUBCASE("constant volume is a fixed point") {
        const Volume c({16, 16, 16}, 0.4);
        for (Interp k : {Interp::nearest, Interp::linear, Interp::cubic}) {
            CHECK(testutil::max_abs_diff(lr_simulate(c, {1, 2, 2}, k).data, c.data) < 1e-6);
        }
    }
    SUBCASE("unit factors reproduce the input") {
        const auto v = random_volume({8, 9, 10}, 2);
        CHECK(testutil::max_abs_diff(lr_simulate(v, {1, 1, 1}).data, v.data) < 1e-6);
    }
    SUBCASE("band-pass behavior on 64^3") {
        const auto low = cosine_y(64, 3.0);
        const auto out_low = lr_simulate(low, {1, 2, 2});
        CHECK(out_low.shape == low.shape);
        CHECK(correlation(out_low, low) > 0.99);
        const auto high = cosine_y(64, 24.0);
        CHECK(max_abs(lr_simulate(high, {1, 2, 2}).data) < 0.05 * max_abs(high.data));
    }
    SUBCASE("near-projection: a second pass changes little") {
        const auto v = random_volume({24, 24, 24}, 21);
        const auto once = lr_simulate(v, {1, 2, 2});
        const auto twice = lr_simulate(once, {1, 2, 2});
        std::vector<double> diff(once.data.size());
        for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = twice.data[i] - once.data[i];
        MESSAGE("relative energy change on white noise: " << energy(diff) / energy(once.data));
        const auto smooth = lr_simulate(cosine_y(32, 2.0), {1, 2, 2});
        const auto smooth2 = lr_simulate(smooth, {1, 2, 2});
        std::vector<double> d2(smooth.data.size());
        for (std::size_t i = 0; i < d2.size(); ++i) d2[i] = smooth2.data[i] - smooth.data[i];
        CHECK(energy(d2) / energy(smooth.data) < 0.01);
    }
    SUBCASE("real in, real out") {
        double imag = 1.0;
        const auto v = random_volume({16, 15, 14}, 4);
        (void)kspace_downsample(v, {1, 2, 2}, &imag);
        CHECK(imag < 1e-6 * max_abs(v.data));
    }
    SUBCASE("metadata") {
        auto v = random_volume({16, 16, 16}, 4);
        v.voxel_size = std::array<double, 3>{0.7, 0.7, 0.7};
        v.subject_id = "s01";
        const auto lr = lr_simulate(v, {1, 2, 2});
        CHECK(lr.voxel_size == v.voxel_size);
        CHECK(lr.subject_id == "s01");
        const auto small = kspace_downsample(v, {1, 2, 2});
        CHECK(small.shape == Extent3{16, 8, 8});
        CHECK((*small.voxel_size)[1] == doctest::Approx(1.4));
    }
}
