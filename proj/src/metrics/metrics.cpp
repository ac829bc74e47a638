#include "voxelsr/metrics/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>

namespace voxelsr::metrics {

namespace {

void require_same(const Volume& a, const Volume& b, const char* what) {
    if (a.shape != b.shape) {
        throw VolumeError(std::string(what) + ": shapes " + extent_str(a.shape) + " and " + extent_str(b.shape) +
                          " differ");
    }
}

double ref_range(const Volume& ref) { return ref.max() - ref.min(); }

double mse(const Volume& a, const Volume& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const double d = a.data[i] - b.data[i];
        s += d * d;
    }
    return s / static_cast<double>(a.data.size());
}

// Valid-mode separable filtering of a (D, H, W) array along the listed axes.
std::vector<double> filter_valid(const std::vector<double>& in, Extent3& shape, const std::vector<double>& taps,
                                 const std::vector<int>& axes) {
    std::vector<double> cur = in;
    const auto k = static_cast<std::int64_t>(taps.size());
    for (int axis : axes) {
        const auto a = static_cast<std::size_t>(axis);
        Extent3 ns = shape;
        ns[a] = shape[a] - k + 1;
        std::vector<double> out(static_cast<std::size_t>(ns[0] * ns[1] * ns[2]), 0.0);
        const std::int64_t step = axis == 2 ? 1 : axis == 1 ? shape[2] : shape[1] * shape[2];
        for (std::int64_t z = 0; z < ns[0]; ++z)
            for (std::int64_t y = 0; y < ns[1]; ++y)
                for (std::int64_t x = 0; x < ns[2]; ++x) {
                    const std::int64_t base = (z * shape[1] + y) * shape[2] + x;
                    double acc = 0.0;
                    for (std::int64_t t = 0; t < k; ++t) acc += taps[static_cast<std::size_t>(t)] * cur[static_cast<std::size_t>(base + t * step)];
                    out[static_cast<std::size_t>((z * ns[1] + y) * ns[2] + x)] = acc;
                }
        cur = std::move(out);
        shape = ns;
    }
    return cur;
}

// Mean SSIM over the valid window positions of the filtered axes.
double ssim_block(const std::vector<double>& x, const std::vector<double>& y, Extent3 shape,
                  const std::vector<double>& taps, const std::vector<int>& axes, double c1, double c2) {
    std::vector<double> xx(x.size()), yy(x.size()), xy(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        xx[i] = x[i] * x[i];
        yy[i] = y[i] * y[i];
        xy[i] = x[i] * y[i];
    }
    Extent3 s = shape;
    const auto mx = filter_valid(x, s, taps, axes);
    s = shape;
    const auto my = filter_valid(y, s, taps, axes);
    s = shape;
    const auto exx = filter_valid(xx, s, taps, axes);
    s = shape;
    const auto eyy = filter_valid(yy, s, taps, axes);
    s = shape;
    const auto exy = filter_valid(xy, s, taps, axes);
    double total = 0.0;
    for (std::size_t i = 0; i < mx.size(); ++i) {
        const double vx = exx[i] - mx[i] * mx[i];
        const double vy = eyy[i] - my[i] * my[i];
        const double cxy = exy[i] - mx[i] * my[i];
        total += ((2.0 * mx[i] * my[i] + c1) * (2.0 * cxy + c2)) /
                 ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
    }
    return total / static_cast<double>(mx.size());
}

}  // namespace

double psnr(const Volume& ref, const Volume& test, std::optional<double> data_range) {
    require_same(ref, test, "psnr");
    const double range = data_range.value_or(ref_range(ref));
    if (!(range > 0.0)) throw VolumeError("psnr: data range must be positive");
    const double m = mse(ref, test);
    if (m == 0.0) return psnr_infinite;
    return 10.0 * std::log10(range * range / m);
}

std::vector<double> gaussian_window(int size, double sigma) {
    if (size < 1 || !(sigma > 0.0)) throw VolumeError("gaussian window needs size >= 1 and sigma > 0");
    std::vector<double> w(static_cast<std::size_t>(size));
    const double c = (size - 1) / 2.0;
    double s = 0.0;
    for (int i = 0; i < size; ++i) {
        w[static_cast<std::size_t>(i)] = std::exp(-(i - c) * (i - c) / (2.0 * sigma * sigma));
        s += w[static_cast<std::size_t>(i)];
    }
    for (auto& v : w) v /= s;
    return w;
}

double ssim(const Volume& ref, const Volume& test, const SsimOptions& opt) {
    require_same(ref, test, "ssim");
    if (opt.slice_axis < 0 || opt.slice_axis > 2) throw VolumeError("ssim: slice_axis must be 0, 1 or 2");
    const double range = opt.data_range.value_or(ref_range(ref));
    if (!(range > 0.0)) throw VolumeError("ssim: data range must be positive (constant reference needs an explicit range)");
    const double c1 = (opt.k1 * range) * (opt.k1 * range);
    const double c2 = (opt.k2 * range) * (opt.k2 * range);
    const auto taps = gaussian_window(opt.window, opt.sigma);

    std::vector<int> axes;
    for (int a = 0; a < 3; ++a) {
        if (opt.mode == SsimMode::full_3d || a != opt.slice_axis) axes.push_back(a);
    }
    for (int a : axes) {
        if (ref.shape[static_cast<std::size_t>(a)] < opt.window) {
            throw VolumeError("ssim: extent " + extent_str(ref.shape) + " is smaller than the " +
                              std::to_string(opt.window) + "-voxel window");
        }
    }
    if (opt.mode == SsimMode::full_3d) return ssim_block(ref.data, test.data, ref.shape, taps, axes, c1, c2);

    // Slicewise: gather each slice as a (1, A, B) block.
    const auto sa = static_cast<std::size_t>(opt.slice_axis);
    const auto a0 = static_cast<std::size_t>(axes[0]);
    const auto a1 = static_cast<std::size_t>(axes[1]);
    const Extent3 slice_shape{1, ref.shape[a0], ref.shape[a1]};
    std::vector<double> xs(static_cast<std::size_t>(slice_shape[1] * slice_shape[2]));
    std::vector<double> ys(xs.size());
    double total = 0.0;
    for (std::int64_t s = 0; s < ref.shape[sa]; ++s) {
        std::size_t k = 0;
        for (std::int64_t i = 0; i < slice_shape[1]; ++i)
            for (std::int64_t j = 0; j < slice_shape[2]; ++j, ++k) {
                std::int64_t p[3];
                p[sa] = s;
                p[a0] = i;
                p[a1] = j;
                xs[k] = ref.at(p[0], p[1], p[2]);
                ys[k] = test.at(p[0], p[1], p[2]);
            }
        total += ssim_block(xs, ys, slice_shape, taps, {1, 2}, c1, c2);
    }
    return total / static_cast<double>(ref.shape[sa]);
}

double nrmse(const Volume& ref, const Volume& test, Normalizer norm) {
    require_same(ref, test, "nrmse");
    double denom = 0.0;
    if (norm == Normalizer::range) {
        denom = ref_range(ref);
    } else {
        for (double v : ref.data) denom += v;
        denom /= static_cast<double>(ref.data.size());
    }
    if (denom == 0.0) throw VolumeError("nrmse: normalizer of the reference is zero");
    return std::sqrt(mse(ref, test)) / std::abs(denom);
}

Volume crop_margin(const Volume& v, int margin) {
    if (margin < 0) throw VolumeError("crop margin must be non-negative");
    Extent3 s{};
    for (std::size_t a = 0; a < 3; ++a) {
        s[a] = v.shape[a] - 2 * margin;
        if (s[a] < 1) {
            throw VolumeError("crop margin " + std::to_string(margin) + " leaves nothing of " + extent_str(v.shape));
        }
    }
    Volume out(s);
    for (std::int64_t z = 0; z < s[0]; ++z)
        for (std::int64_t y = 0; y < s[1]; ++y)
            for (std::int64_t x = 0; x < s[2]; ++x) out.at(z, y, x) = v.at(z + margin, y + margin, x + margin);
    out.voxel_size = v.voxel_size;
    out.subject_id = v.subject_id;
    return out;
}

MetricsRow evaluate_subject(const Volume& ref, const Volume& sr, const EvalOptions& opt) {
    require_same(ref, sr, "evaluate_subject");
    const Volume r = crop_margin(ref, opt.crop_margin);
    const Volume t = crop_margin(sr, opt.crop_margin);
    MetricsRow row;
    row.subject_id = ref.subject_id;
    row.region = opt.crop_margin == 0 ? "full" : "crop" + std::to_string(opt.crop_margin);
    row.ssim = ssim(r, t, opt.ssim);
    if (opt.mask_threshold) {
        std::vector<double> rv, tv;
        for (std::size_t i = 0; i < r.data.size(); ++i) {
            if (r.data[i] > *opt.mask_threshold) {
                rv.push_back(r.data[i]);
                tv.push_back(t.data[i]);
            }
        }
        if (rv.empty()) throw VolumeError("evaluate_subject: mask selects no voxels");
        const auto n = static_cast<std::int64_t>(rv.size());
        const Volume rm({1, 1, n}, std::move(rv)), tm({1, 1, n}, std::move(tv));
        // Range and mean still come from the whole cropped reference.
        const double range = opt.ssim.data_range.value_or(ref_range(r));
        row.psnr = psnr(rm, tm, range);
        double denom = range;
        if (opt.normalizer == Normalizer::mean) {
            denom = 0.0;
            for (double v : r.data) denom += v;
            denom /= static_cast<double>(r.data.size());
        }
        if (denom == 0.0) throw VolumeError("nrmse: normalizer of the reference is zero");
        row.nrmse = std::sqrt(mse(rm, tm)) / std::abs(denom);
        row.region += "+mask";
    } else {
        row.psnr = psnr(r, t, opt.ssim.data_range);
        row.nrmse = nrmse(r, t, opt.normalizer);
    }
    return row;
}

namespace {

Stat stat_of(const std::vector<MetricsRow>& rows, double MetricsRow::*field) {
    Stat s;
    if (rows.empty()) return s;
    // Shifted by the first value, so identical rows give that value back exactly.
    const double first = rows.front().*field;
    if (std::isinf(first)) {
        s.mean = first;
        for (const auto& r : rows) {
            if (r.*field != first) s.mean = std::numeric_limits<double>::quiet_NaN();
        }
        return s;
    }
    double shift = 0.0;
    for (const auto& r : rows) shift += r.*field - first;
    s.mean = first + shift / static_cast<double>(rows.size());
    if (!std::isfinite(s.mean)) return s;
    if (rows.size() > 1) {
        double v = 0.0;
        for (const auto& r : rows) v += (r.*field - s.mean) * (r.*field - s.mean);
        s.std = std::sqrt(v / static_cast<double>(rows.size() - 1));
    }
    return s;
}

}  // namespace

Summary aggregate(const std::vector<MetricsRow>& rows) {
    Summary s;
    s.count = rows.size();
    s.ssim = stat_of(rows, &MetricsRow::ssim);
    s.psnr = stat_of(rows, &MetricsRow::psnr);
    s.nrmse = stat_of(rows, &MetricsRow::nrmse);
    return s;
}

std::string format_number(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    if (std::isnan(v)) return "nan";
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

void write_rows_csv(std::ostream& os, const std::vector<MetricsRow>& rows) {
    os << "subject_id,ssim,psnr,nrmse,region\n";
    for (const auto& r : rows) {
        os << r.subject_id << ',' << format_number(r.ssim) << ',' << format_number(r.psnr) << ','
           << format_number(r.nrmse) << ',' << r.region << '\n';
    }
    const auto s = aggregate(rows);
    const std::string region = rows.empty() ? "" : rows.front().region;
    os << "mean," << format_number(s.ssim.mean) << ',' << format_number(s.psnr.mean) << ','
       << format_number(s.nrmse.mean) << ',' << region << '\n';
    os << "std," << format_number(s.ssim.std) << ',' << format_number(s.psnr.std) << ','
       << format_number(s.nrmse.std) << ',' << region << '\n';
}

void write_table_csv(std::ostream& os, const std::vector<TableRow>& rows) {
    os << table_header << '\n';
    for (const auto& r : rows) {
        const auto& s = r.summary;
        os << r.config << ',' << format_number(s.ssim.mean) << ',' << format_number(s.ssim.std) << ','
           << format_number(s.psnr.mean) << ',' << format_number(s.psnr.std) << ',' << format_number(s.nrmse.mean)
           << ',' << format_number(s.nrmse.std) << ',' << r.params << ',' << r.macs << ',' << format_number(r.time_s)
           << '\n';
    }
}

}  // namespace voxelsr::metrics
