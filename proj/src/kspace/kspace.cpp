#include "voxelsr/kspace/kspace.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <mutex>
#include <stdexcept>
#include <string>

#include <fftw3.h>

namespace voxelsr::kspace {

namespace {

// FFTW's planner is not thread-safe; execution is.
std::mutex& planner_mutex() {
    static std::mutex m;
    return m;
}

fftw_complex* as_fftw(Complex* p) { return reinterpret_cast<fftw_complex*>(p); }

void execute(int rank, const int* dims, Complex* data, bool inverse) {
    fftw_plan plan = nullptr;
    {
        std::lock_guard lock(planner_mutex());
        plan = fftw_plan_dft(rank, dims, as_fftw(data), as_fftw(data), inverse ? FFTW_BACKWARD : FFTW_FORWARD,
                             FFTW_ESTIMATE);
    }
    if (!plan) throw std::runtime_error("FFTW could not plan the transform");
    fftw_execute(plan);
    std::lock_guard lock(planner_mutex());
    fftw_destroy_plan(plan);
}

void transform3(std::vector<Complex>& v, const Extent3& s, bool inverse) {
    const int dims[3] = {static_cast<int>(s[0]), static_cast<int>(s[1]), static_cast<int>(s[2])};
    execute(3, dims, v.data(), inverse);
}

// Cyclic shift so raw index 0 lands on floor(n/2) (forward) or back.
std::vector<Complex> shift(const std::vector<Complex>& v, const Extent3& s, bool to_center) {
    std::vector<Complex> out(v.size());
    std::array<std::int64_t, 3> off{};
    for (std::size_t a = 0; a < 3; ++a) off[a] = to_center ? s[a] / 2 : s[a] - s[a] / 2;
    for (std::int64_t z = 0; z < s[0]; ++z) {
        const std::int64_t zz = (z + off[0]) % s[0];
        for (std::int64_t y = 0; y < s[1]; ++y) {
            const std::int64_t yy = (y + off[1]) % s[1];
            for (std::int64_t x = 0; x < s[2]; ++x) {
                const std::int64_t xx = (x + off[2]) % s[2];
                out[static_cast<std::size_t>((zz * s[1] + yy) * s[2] + xx)] =
                    v[static_cast<std::size_t>((z * s[1] + y) * s[2] + x)];
            }
        }
    }
    return out;
}

// Source taps and weights for one output index along one axis.
struct Taps {
    std::array<std::int64_t, 4> idx{};
    std::array<double, 4> w{};
    int count = 0;
};

double catmull_rom(double t) {
    constexpr double a = -0.5;
    t = std::abs(t);
    if (t <= 1.0) return ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0;
    if (t < 2.0) return ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a;
    return 0.0;
}

std::vector<Taps> plan_axis(std::int64_t n_in, std::int64_t n_out, Interp kind) {
    std::vector<Taps> plan(static_cast<std::size_t>(n_out));
    const double scale = static_cast<double>(n_in) / static_cast<double>(n_out);
    auto clampi = [&](std::int64_t i) { return std::clamp<std::int64_t>(i, 0, n_in - 1); };
    for (std::int64_t i = 0; i < n_out; ++i) {
        const double src = std::clamp((static_cast<double>(i) + 0.5) * scale - 0.5, 0.0, static_cast<double>(n_in - 1));
        Taps& t = plan[static_cast<std::size_t>(i)];
        const auto i0 = static_cast<std::int64_t>(std::floor(src));
        const double f = src - static_cast<double>(i0);
        switch (kind) {
            case Interp::nearest:
                t.idx[0] = clampi(static_cast<std::int64_t>(std::floor(src + 0.5)));
                t.w[0] = 1.0;
                t.count = 1;
                break;
            case Interp::linear:
                t.idx = {i0, clampi(i0 + 1), 0, 0};
                t.w = {1.0 - f, f, 0.0, 0.0};
                t.count = 2;
                break;
            case Interp::cubic:
                for (int k = 0; k < 4; ++k) {
                    t.idx[static_cast<std::size_t>(k)] = clampi(i0 - 1 + k);
                    t.w[static_cast<std::size_t>(k)] = catmull_rom(f - static_cast<double>(k - 1));
                }
                t.count = 4;
                break;
        }
    }
    return plan;
}

void check_factors(const Extent3& shape, const Factors& f) {
    for (std::size_t a = 0; a < 3; ++a) {
        if (f[a] < 1 || f[a] > shape[a]) {
            throw VolumeError("truncation factor " + std::to_string(f[a]) + " invalid for axis " + std::to_string(a) +
                              " of extent " + std::to_string(shape[a]));
        }
    }
}

// The small-grid inverse samples the band-limited image at j * N/M. Shift it by
// (N/M - 1)/2 so sample j lands on (j + 0.5) * N/M - 0.5, the cell center that
// resample() assumes.
void align_to_cell_centers(Spectrum& s, const Extent3& original) {
    std::array<std::vector<Complex>, 3> ramp;
    for (std::size_t a = 0; a < 3; ++a) {
        const std::int64_t m = s.shape[a];
        const double n = static_cast<double>(original[a]);
        const double delta = (n / static_cast<double>(m) - 1.0) / 2.0;
        ramp[a].resize(static_cast<std::size_t>(m));
        for (std::int64_t l = 0; l < m; ++l) {
            const double k = static_cast<double>(l - m / 2);
            ramp[a][static_cast<std::size_t>(l)] = std::polar(1.0, 2.0 * std::numbers::pi * k * delta / n);
        }
    }
    for (std::int64_t z = 0; z < s.shape[0]; ++z)
        for (std::int64_t y = 0; y < s.shape[1]; ++y) {
            const Complex zy = ramp[0][static_cast<std::size_t>(z)] * ramp[1][static_cast<std::size_t>(y)];
            for (std::int64_t x = 0; x < s.shape[2]; ++x) {
                s.values[static_cast<std::size_t>((z * s.shape[1] + y) * s.shape[2] + x)] *= zy * ramp[2][static_cast<std::size_t>(x)];
            }
        }
}

}  // namespace

void fft(std::span<Complex> data, bool inverse) {
    if (data.size() <= 1) return;
    const int n = static_cast<int>(data.size());
    execute(1, &n, data.data(), inverse);
}

Spectrum dft3(const Volume& v, bool centered) {
    Spectrum s;
    s.shape = v.shape;
    s.values.assign(v.data.begin(), v.data.end());
    transform3(s.values, s.shape, false);
    s.centered = centered;
    if (centered) s.values = shift(s.values, s.shape, true);
    return s;
}

InverseResult idft3(const Spectrum& s) {
    std::vector<Complex> v = s.centered ? shift(s.values, s.shape, false) : s.values;
    transform3(v, s.shape, true);
    const double scale = 1.0 / static_cast<double>(s.size());
    InverseResult r;
    r.volume = Volume(s.shape);
    for (std::size_t i = 0; i < v.size(); ++i) {
        r.volume.data[i] = v[i].real() * scale;
        r.max_imag = std::max(r.max_imag, std::abs(v[i].imag() * scale));
    }
    return r;
}

Spectrum truncate_kspace(const Spectrum& s, const Factors& factors) {
    if (!s.centered) throw VolumeError("truncate_kspace needs a centered spectrum");
    check_factors(s.shape, factors);
    Spectrum out;
    out.centered = true;
    Extent3 start{};
    std::array<bool, 3> drop_low{};
    for (std::size_t a = 0; a < 3; ++a) {
        const std::int64_t n = s.shape[a];
        const std::int64_t m = (n + factors[a] - 1) / factors[a];
        out.shape[a] = m;
        start[a] = n / 2 - m / 2;
        drop_low[a] = m % 2 == 0 && m < n;
    }
    out.values.assign(static_cast<std::size_t>(out.size()), Complex{});
    for (std::int64_t z = 0; z < out.shape[0]; ++z) {
        if (drop_low[0] && z == 0) continue;
        for (std::int64_t y = 0; y < out.shape[1]; ++y) {
            if (drop_low[1] && y == 0) continue;
            for (std::int64_t x = 0; x < out.shape[2]; ++x) {
                if (drop_low[2] && x == 0) continue;
                out.values[static_cast<std::size_t>((z * out.shape[1] + y) * out.shape[2] + x)] =
                    s.values[static_cast<std::size_t>(((z + start[0]) * s.shape[1] + y + start[1]) * s.shape[2] + x +
                                                      start[2])];
            }
        }
    }
    return out;
}

double spectral_energy(const Spectrum& s) {
    double e = 0.0;
    for (const auto& c : s.values) e += std::norm(c);
    return e;
}

Volume resample(const Volume& v, const Extent3& target, Interp kind) {
    for (auto d : target) {
        if (d < 1) throw VolumeError("resample target extents must be positive, got " + extent_str(target));
    }
    Volume cur = v;
    for (int axis = 0; axis < 3; ++axis) {
        const auto a = static_cast<std::size_t>(axis);
        if (cur.shape[a] == target[a]) continue;
        const auto plan = plan_axis(cur.shape[a], target[a], kind);
        Extent3 ns = cur.shape;
        ns[a] = target[a];
        Volume next(ns);
        for (std::int64_t z = 0; z < ns[0]; ++z)
            for (std::int64_t y = 0; y < ns[1]; ++y)
                for (std::int64_t x = 0; x < ns[2]; ++x) {
                    const std::array<std::int64_t, 3> p{z, y, x};
                    const Taps& t = plan[static_cast<std::size_t>(p[a])];
                    double acc = 0.0;
                    for (int k = 0; k < t.count; ++k) {
                        auto q = p;
                        q[a] = t.idx[static_cast<std::size_t>(k)];
                        acc += t.w[static_cast<std::size_t>(k)] * cur.at(q[0], q[1], q[2]);
                    }
                    next.at(z, y, x) = acc;
                }
        cur.shape = ns;
        cur.data = std::move(next.data);
    }
    return cur;
}

Volume kspace_downsample(const Volume& v, const Factors& factors, double* max_imag) {
    check_factors(v.shape, factors);
    auto small = truncate_kspace(dft3(v, true), factors);
    align_to_cell_centers(small, v.shape);
    auto inv = idft3(small);
    const double scale = static_cast<double>(small.size()) / static_cast<double>(v.size());
    for (auto& x : inv.volume.data) x *= scale;
    if (max_imag) *max_imag = inv.max_imag * scale;
    inv.volume.subject_id = v.subject_id;
    if (v.voxel_size) {
        auto vs = *v.voxel_size;
        for (std::size_t a = 0; a < 3; ++a) {
            vs[a] *= static_cast<double>(v.shape[a]) / static_cast<double>(small.shape[a]);
        }
        inv.volume.voxel_size = vs;
    }
    return inv.volume;
}

Volume lr_simulate(const Volume& v, const Factors& factors, Interp kind) {
    Volume out = resample(kspace_downsample(v, factors), v.shape, kind);
    out.voxel_size = v.voxel_size;
    out.subject_id = v.subject_id;
    return out;
}

}  // namespace voxelsr::kspace
