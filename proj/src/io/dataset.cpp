#include "voxelsr/io/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>
#include <stdexcept>

#include "json.hpp"

namespace voxelsr::io {

std::array<std::size_t, 4> split_sizes(std::size_t n, const std::array<double, 4>& ratios) {
    double total = 0.0;
    for (double r : ratios) {
        if (!(r >= 0.0) || !std::isfinite(r)) throw std::invalid_argument("split ratios must be finite and non-negative");
        total += r;
    }
    if (!(total > 0.0)) throw std::invalid_argument("split ratios must not all be zero");
    std::array<std::size_t, 4> sizes{};
    std::array<double, 4> frac{};
    std::size_t used = 0;
    for (std::size_t i = 0; i < 4; ++i) {
        const double q = static_cast<double>(n) * ratios[i] / total;
        sizes[i] = static_cast<std::size_t>(std::floor(q));
        frac[i] = q - std::floor(q);
        used += sizes[i];
    }
    std::array<std::size_t, 4> order{0, 1, 2, 3};
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return frac[a] > frac[b]; });
    for (std::size_t k = 0; used < n; ++k, ++used) sizes[order[k % 4]] += 1;
    return sizes;
}

SplitManifest make_split(std::vector<std::string> ids, std::uint64_t seed, const std::array<double, 4>& ratios) {
    if (ids.empty()) throw std::invalid_argument("make_split: no subject ids");
    if (ids.size() < 4) throw std::invalid_argument("make_split: need at least 4 subjects, got " + std::to_string(ids.size()));
    if (std::set<std::string>(ids.begin(), ids.end()).size() != ids.size()) {
        throw std::invalid_argument("make_split: subject ids must be unique");
    }
    std::mt19937_64 rng(seed);
    for (std::size_t i = ids.size() - 1; i > 0; --i) {
        const std::size_t j = static_cast<std::size_t>(rng() % (i + 1));
        std::swap(ids[i], ids[j]);
    }
    const auto sizes = split_sizes(ids.size(), ratios);
    SplitManifest m;
    m.seed = seed;
    m.ratios = ratios;
    std::vector<std::string>* parts[4] = {&m.train, &m.validation, &m.evaluation, &m.test};
    std::size_t at = 0;
    for (std::size_t p = 0; p < 4; ++p) {
        parts[p]->assign(ids.begin() + static_cast<std::ptrdiff_t>(at), ids.begin() + static_cast<std::ptrdiff_t>(at + sizes[p]));
        at += sizes[p];
    }
    return m;
}

std::string SplitManifest::to_json() const {
    nlohmann::json j;
    j["seed"] = seed;
    j["ratios"] = ratios;
    j["train"] = train;
    j["validation"] = validation;
    j["evaluation"] = evaluation;
    j["test"] = test;
    return j.dump(2);
}

SplitManifest SplitManifest::from_json(const std::string& text) {
    const auto j = nlohmann::json::parse(text);
    SplitManifest m;
    m.seed = j.at("seed").get<std::uint64_t>();
    m.ratios = j.at("ratios").get<std::array<double, 4>>();
    m.train = j.at("train").get<std::vector<std::string>>();
    m.validation = j.at("validation").get<std::vector<std::string>>();
    m.evaluation = j.at("evaluation").get<std::vector<std::string>>();
    m.test = j.at("test").get<std::vector<std::string>>();
    return m;
}

std::string to_string(PhantomRecipe r) { return r == PhantomRecipe::smooth_blobs ? "smooth_blobs" : "blobs_plus_tubes"; }

PhantomRecipe parse_recipe(const std::string& s) {
    if (s == "smooth_blobs") return PhantomRecipe::smooth_blobs;
    if (s == "blobs_plus_tubes") return PhantomRecipe::blobs_plus_tubes;
    throw std::invalid_argument("unknown phantom recipe \"" + s + "\" (smooth_blobs, blobs_plus_tubes)");
}

void normalize_unit_range(Volume& v) {
    const double lo = v.min(), hi = v.max();
    const double span = hi - lo;
    for (auto& x : v.data) x = span > 0.0 ? (x - lo) / span : 0.0;
}

namespace {

// [0, 1) from the top 53 bits, identical on every platform.
double unit(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }
double between(std::mt19937_64& rng, double lo, double hi) { return lo + (hi - lo) * unit(rng); }

}  // namespace

Volume synth_phantom(const Extent3& shape, std::uint64_t seed, PhantomRecipe recipe) {
    for (auto d : shape) {
        if (d < 16) throw VolumeError("phantom extents must be at least 16, got " + extent_str(shape));
    }
    std::mt19937_64 rng(seed);
    Volume v(shape, 0.0);
    const double small = static_cast<double>(*std::min_element(shape.begin(), shape.end()));

    const int blobs = 8 + static_cast<int>(rng() % 9);
    for (int b = 0; b < blobs; ++b) {
        double c[3];
        for (std::size_t a = 0; a < 3; ++a) c[a] = between(rng, 0.15, 0.85) * static_cast<double>(shape[a]);
        const double sigma = between(rng, 0.08, 0.22) * small;
        const double amp = between(rng, 0.3, 1.0);
        const double inv = 1.0 / (2.0 * sigma * sigma);
        for (std::int64_t z = 0; z < shape[0]; ++z)
            for (std::int64_t y = 0; y < shape[1]; ++y) {
                const double dzy = (z - c[0]) * (z - c[0]) + (y - c[1]) * (y - c[1]);
                for (std::int64_t x = 0; x < shape[2]; ++x) {
                    v.at(z, y, x) += amp * std::exp(-(dzy + (x - c[2]) * (x - c[2])) * inv);
                }
            }
    }

    if (recipe == PhantomRecipe::blobs_plus_tubes) {
        const int tubes = 3 + static_cast<int>(rng() % 4);
        for (int t = 0; t < tubes; ++t) {
            double p[3], d[3];
            for (std::size_t a = 0; a < 3; ++a) p[a] = between(rng, 0.2, 0.8) * static_cast<double>(shape[a]);
            double n = 0.0;
            for (double& e : d) {
                e = between(rng, -1.0, 1.0);
                n += e * e;
            }
            n = std::sqrt(std::max(n, 1e-12));
            for (double& e : d) e /= n;
            const double width = between(rng, 1.0, 2.0);
            const double s = width / 2.0;
            const double amp = between(rng, 0.8, 1.2);
            const double inv = 1.0 / (2.0 * s * s);
            for (std::int64_t z = 0; z < shape[0]; ++z)
                for (std::int64_t y = 0; y < shape[1]; ++y)
                    for (std::int64_t x = 0; x < shape[2]; ++x) {
                        const double r[3] = {z - p[0], y - p[1], x - p[2]};
                        const double along = r[0] * d[0] + r[1] * d[1] + r[2] * d[2];
                        const double dist2 = r[0] * r[0] + r[1] * r[1] + r[2] * r[2] - along * along;
                        if (dist2 < 16.0 * s * s) v.at(z, y, x) += amp * std::exp(-dist2 * inv);
                    }
        }
    }
    normalize_unit_range(v);
    v.subject_id = "phantom" + std::to_string(seed);
    return v;
}

}  // namespace voxelsr::io
