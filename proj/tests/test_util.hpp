#pragma once

// Shared helpers for the unit suites: seeded data and independent oracles.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "voxelsr/autodiff/tensor.hpp"

namespace testutil {

// Fresh directory under the system temp dir, removed on destruction.
struct TempDir {
    std::filesystem::path path;
    explicit TempDir(const std::string& prefix = "voxelsr_test_") {
        path = std::filesystem::temp_directory_path() / (prefix + std::to_string(std::random_device{}()));
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
};

inline std::vector<double> uniform_values(std::size_t n, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    std::mt19937_64 rng(seed);
    std::vector<double> out(n);
    for (auto& v : out) v = lo + (hi - lo) * static_cast<double>(rng() >> 11) * 0x1.0p-53;
    return out;
}

template <typename T = double>
voxelsr::ad::Tensor<T> random_tensor(const voxelsr::ad::Shape& shape, std::uint64_t seed, double lo = -1.0,
                                     double hi = 1.0) {
    auto v = uniform_values(static_cast<std::size_t>(shape.numel()), seed, lo, hi);
    return voxelsr::ad::Tensor<T>(shape, std::vector<T>(v.begin(), v.end()));
}

// Direct nested-loop cross-correlation. `same` padding keeps ceil(in/stride)
// outputs with the odd pad voxel after the data.
inline std::vector<double> naive_conv3d(const std::vector<double>& x, const std::vector<std::int64_t>& xs,
                                        const std::vector<double>& w, const std::vector<std::int64_t>& ws,
                                        std::int64_t stride, bool same, std::vector<std::int64_t>& out_shape) {
    const std::int64_t n_batch = xs[0], cin = xs[1], cout = ws[0];
    std::int64_t in[3], k[3], out[3], pad[3];
    for (int a = 0; a < 3; ++a) {
        in[a] = xs[a + 2];
        k[a] = ws[a + 2];
        if (same) {
            out[a] = (in[a] + stride - 1) / stride;
            pad[a] = std::max<std::int64_t>((out[a] - 1) * stride + k[a] - in[a], 0) / 2;
        } else {
            out[a] = (in[a] - k[a]) / stride + 1;
            pad[a] = 0;
        }
    }
    out_shape = {n_batch, cout, out[0], out[1], out[2]};
    std::vector<double> y(static_cast<std::size_t>(n_batch * cout * out[0] * out[1] * out[2]), 0.0);
    for (std::int64_t n = 0; n < n_batch; ++n)
        for (std::int64_t co = 0; co < cout; ++co)
            for (std::int64_t z = 0; z < out[0]; ++z)
                for (std::int64_t yy = 0; yy < out[1]; ++yy)
                    for (std::int64_t xx = 0; xx < out[2]; ++xx) {
                        double acc = 0.0;
                        for (std::int64_t ci = 0; ci < cin; ++ci)
                            for (std::int64_t a = 0; a < k[0]; ++a)
                                for (std::int64_t b = 0; b < k[1]; ++b)
                                    for (std::int64_t c = 0; c < k[2]; ++c) {
                                        const std::int64_t zi = z * stride + a - pad[0];
                                        const std::int64_t yi = yy * stride + b - pad[1];
                                        const std::int64_t xi = xx * stride + c - pad[2];
                                        if (zi < 0 || zi >= in[0] || yi < 0 || yi >= in[1] || xi < 0 || xi >= in[2])
                                            continue;
                                        acc += x[static_cast<std::size_t>(
                                                   (((n * cin + ci) * in[0] + zi) * in[1] + yi) * in[2] + xi)] *
                                               w[static_cast<std::size_t>((((co * cin + ci) * k[0] + a) * k[1] + b) *
                                                                              k[2] +
                                                                          c)];
                                    }
                        y[static_cast<std::size_t>((((n * cout + co) * out[0] + z) * out[1] + yy) * out[2] + xx)] =
                            acc;
                    }
    return y;
}

template <typename T>
double max_abs_diff(const std::vector<T>& a, const std::vector<T>& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
    return m;
}

}  // namespace testutil
