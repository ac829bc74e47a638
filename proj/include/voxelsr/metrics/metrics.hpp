#pragma once

#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "voxelsr/volume.hpp"

namespace voxelsr::metrics {

// PSNR of identical volumes.
inline constexpr double psnr_infinite = std::numeric_limits<double>::infinity();

// 10 log10(range^2 / MSE). The range defaults to max(ref) - min(ref).
[[nodiscard]] double psnr(const Volume& ref, const Volume& test, std::optional<double> data_range = std::nullopt);

enum class SsimMode { slicewise_2d, full_3d };

struct SsimOptions {
    SsimMode mode = SsimMode::slicewise_2d;
    // Slices are taken across this axis; the window spans the other two.
    int slice_axis = 0;
    int window = 11;
    double sigma = 1.5;
    double k1 = 0.01;
    double k2 = 0.03;
    std::optional<double> data_range;  // default max(ref) - min(ref)
};

// Gaussian-windowed SSIM averaged over every valid (fully inside) window
// position; slicewise averages the per-slice means.
[[nodiscard]] double ssim(const Volume& ref, const Volume& test, const SsimOptions& opt = {});

// Normalized 1D Gaussian taps.
[[nodiscard]] std::vector<double> gaussian_window(int size, double sigma);

enum class Normalizer { range, mean };

// sqrt(MSE) / (max(ref) - min(ref)) or / mean(ref).
[[nodiscard]] double nrmse(const Volume& ref, const Volume& test, Normalizer norm = Normalizer::range);

struct MetricsRow {
    std::string subject_id;
    double ssim = 0;
    double psnr = 0;
    double nrmse = 0;
    std::string region;  // "full" or "crop3" and so on
};

struct EvalOptions {
    int crop_margin = 3;
    SsimOptions ssim;
    Normalizer normalizer = Normalizer::range;
    // PSNR and NRMSE over voxels with ref > threshold only (SSIM is unmasked).
    std::optional<double> mask_threshold;
};

[[nodiscard]] MetricsRow evaluate_subject(const Volume& ref, const Volume& sr, const EvalOptions& opt = {});

// Removes `margin` voxels from every face.
[[nodiscard]] Volume crop_margin(const Volume& v, int margin);

struct Stat {
    double mean = 0;
    double std = 0;  // sample standard deviation; 0 for a single row
};

struct Summary {
    std::size_t count = 0;
    Stat ssim, psnr, nrmse;
};

[[nodiscard]] Summary aggregate(const std::vector<MetricsRow>& rows);

// Shortest round-trip decimal; "inf" for the PSNR marker.
[[nodiscard]] std::string format_number(double v);

// Per-subject rows followed by a "mean" and a "std" row.
void write_rows_csv(std::ostream& os, const std::vector<MetricsRow>& rows);

struct TableRow {
    std::string config;
    Summary summary;
    std::int64_t params = 0;
    std::int64_t macs = 0;
    double time_s = 0;
};

inline constexpr const char* table_header =
    "config,ssim_mean,ssim_std,psnr_mean,psnr_std,nrmse_mean,nrmse_std,params,macs,time_s";

void write_table_csv(std::ostream& os, const std::vector<TableRow>& rows);

}  // namespace voxelsr::metrics
