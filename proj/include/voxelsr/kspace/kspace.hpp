#pragma once

#include <array>
#include <complex>
#include <span>
#include <vector>

#include "voxelsr/volume.hpp"

namespace voxelsr::kspace {

using Complex = std::complex<double>;
using Factors = std::array<int, 3>;

// 3D spectrum. When centered, the zero-frequency bin of each axis sits at
// index floor(n/2).
struct Spectrum {
    Extent3 shape{1, 1, 1};
    std::vector<Complex> values;
    bool centered = true;

    [[nodiscard]] std::int64_t size() const noexcept { return shape[0] * shape[1] * shape[2]; }
};

// In-place unnormalized 1D DFT, sum_j x_j exp(-+2 pi i jk/n) (sign + when
// inverse).
void fft(std::span<Complex> data, bool inverse);

// Unnormalized forward 3D transform.
[[nodiscard]] Spectrum dft3(const Volume& v, bool centered = true);

struct InverseResult {
    Volume volume;        // real part
    double max_imag = 0;  // largest |imaginary| residue
};

// Normalized (1/n) inverse, so idft3(dft3(v)) = v.
[[nodiscard]] InverseResult idft3(const Spectrum& s);

// Keeps the central ceil(n/f) bins per axis, [c - floor(m/2), c - floor(m/2) + m)
// around the DC index c. For an even kept extent m < n the lowest bin has no
// conjugate partner inside the window and is zeroed.
[[nodiscard]] Spectrum truncate_kspace(const Spectrum& s, const Factors& factors);

[[nodiscard]] double spectral_energy(const Spectrum& s);

enum class Interp { nearest, linear, cubic };

// Separable resampling, align-corners false: source coordinate
// (i + 0.5) * n_in / n_out - 0.5, clamped to [0, n_in - 1]. Cubic uses
// Catmull-Rom (a = -0.5) with edge replication.
[[nodiscard]] Volume resample(const Volume& v, const Extent3& target, Interp kind);

// dft3 -> truncate_kspace -> idft3 -> rescale by kept/original bin count
// (constant volumes are fixed points) -> resample to the original grid.
[[nodiscard]] Volume lr_simulate(const Volume& v, const Factors& factors, Interp kind = Interp::linear);

// Intermediate small-grid volume of lr_simulate (before resampling).
[[nodiscard]] Volume kspace_downsample(const Volume& v, const Factors& factors, double* max_imag = nullptr);

}  // namespace voxelsr::kspace
