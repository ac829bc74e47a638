#include "voxelsr/train/infer.hpp"

#include <algorithm>
#include <chrono>

#include "voxelsr/patch/patch.hpp"

namespace voxelsr::train {

template <typename T>
ad::Tensor<T> to_batch(std::span<const Volume> volumes) {
    if (volumes.empty()) throw VolumeError("to_batch: no volumes");
    const Extent3 s = volumes.front().shape;
    std::vector<T> values;
    values.reserve(volumes.size() * static_cast<std::size_t>(volumes.front().size()));
    for (const auto& v : volumes) {
        if (v.shape != s) throw VolumeError("to_batch: shape " + extent_str(v.shape) + " differs from " + extent_str(s));
        for (double x : v.data) values.push_back(static_cast<T>(x));
    }
    return ad::Tensor<T>(ad::Shape{static_cast<std::int64_t>(volumes.size()), 1, s[0], s[1], s[2]}, std::move(values));
}

template <typename T>
Volume item_volume(const ad::Tensor<T>& batch, std::int64_t item, const Volume& like) {
    const auto& s = batch.shape();
    if (s.rank() != 5 || s[1] != 1 || item < 0 || item >= s[0]) {
        throw ad::ShapeError("item_volume: cannot take item " + std::to_string(item) + " of " + s.str());
    }
    Volume out(Extent3{s[2], s[3], s[4]});
    const auto n = static_cast<std::size_t>(out.size());
    auto v = batch.values();
    std::copy(v.begin() + static_cast<std::ptrdiff_t>(n * static_cast<std::size_t>(item)),
              v.begin() + static_cast<std::ptrdiff_t>(n * static_cast<std::size_t>(item + 1)), out.data.begin());
    out.voxel_size = like.voxel_size;
    out.subject_id = like.subject_id;
    return out;
}

models::NormUse inference_norm(const models::GeneratorConfig& cfg, bool stats_populated) {
    if (cfg.unit_norm == models::UnitNorm::none || stats_populated) return models::NormUse::eval;
    return models::NormUse::batch_only;
}

template <typename T>
Volume super_resolve(const models::ModelParams<T>& generator, const Volume& lr, const InferOptions& opt,
                     InferReport* report) {
    const auto* cfg = std::get_if<models::GeneratorConfig>(&generator.config());
    if (!cfg) throw std::invalid_argument("super_resolve: parameters were not built for a generator");
    if (opt.batch < 1) throw std::invalid_argument("super_resolve: batch must be >= 1");
    const auto start = std::chrono::steady_clock::now();
    const auto grid = patch::plan_grid(lr.shape, opt.patch, opt.margin);
    const auto norm = inference_norm(*cfg, generator.stats_populated());
    auto patches = patch::extract(lr, grid);
    ad::NoGradGuard no_grad;
    for (std::size_t first = 0; first < patches.size(); first += static_cast<std::size_t>(opt.batch)) {
        const std::size_t count = std::min(patches.size() - first, static_cast<std::size_t>(opt.batch));
        const std::span<const Volume> group(patches.data() + first, count);
        auto out = models::generator_forward(generator, to_batch<T>(group), norm);
        for (std::size_t i = 0; i < count; ++i) {
            patches[first + i] = item_volume(out, static_cast<std::int64_t>(i), patches[first + i]);
        }
    }
    Volume sr = patch::merge(patches, grid);
    sr.voxel_size = lr.voxel_size;
    sr.subject_id = lr.subject_id;
    if (report) {
        report->patches = patches.size();
        report->seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        report->voxels_per_second = report->seconds > 0 ? static_cast<double>(lr.size()) / report->seconds : 0.0;
        report->norm = norm;
        report->grid_json = grid.to_json();
    }
    return sr;
}

#define VOXELSR_INSTANTIATE_INFER(T)                                                                         \
    template ad::Tensor<T> to_batch<T>(std::span<const Volume>);                                           \
    template Volume item_volume<T>(const ad::Tensor<T>&, std::int64_t, const Volume&);                      \
    template Volume super_resolve<T>(const models::ModelParams<T>&, const Volume&, const InferOptions&, \
                                     InferReport*);

VOXELSR_INSTANTIATE_INFER(float)
VOXELSR_INSTANTIATE_INFER(double)

}  // namespace voxelsr::train
