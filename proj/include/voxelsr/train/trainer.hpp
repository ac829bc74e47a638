#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "voxelsr/kspace/kspace.hpp"
#include "voxelsr/models/network.hpp"
#include "voxelsr/patch/patch.hpp"
#include "voxelsr/train/optim.hpp"

namespace voxelsr::train {

// LR input already interpolated onto the HR grid, voxel-aligned with hr.
struct SubjectPair {
    Volume lr;
    Volume hr;
};

[[nodiscard]] std::vector<SubjectPair> make_pairs(const std::vector<Volume>& hr, const kspace::Factors& factors,
                                                  kspace::Interp interp = kspace::Interp::linear);

struct TrainConfig {
    double lambda_gan = 0.001;
    double lambda_gp = 10.0;
    double lr_pretrain = 1e-4;
    double lr_gan = 5e-6;
    int batch_size = 2;
    std::int64_t pretrain_steps = 2000;
    std::int64_t gan_steps = 0;  // schedule actions, critic and generator alike
    ScheduleConfig schedule;
    AdamConfig adam;
    std::uint64_t seed = 0;
    Extent3 patch{32, 32, 32};
    unsigned flips = patch::flip_all;
    // Critic layout; its patch is always the training patch.
    models::DiscriminatorConfig critic;
    std::int64_t checkpoint_every = 0;  // 0: last step only
    std::int64_t validate_every = 0;    // 0: first and last step only
    bool log_wall_time = false;  // off keeps metrics.csv reproducible

    // Throws TrainError naming the offending field.
    void validate() const;
    [[nodiscard]] std::string to_json() const;
    // Missing keys keep their defaults; unknown keys are an error.
    [[nodiscard]] static TrainConfig from_json(std::string_view text);
};

// Random training patches. Subjects are visited in a seeded shuffled order,
// reshuffled each time the order is exhausted; every item gets a uniform
// origin and one flip draw applied to both lr and hr.
class PatchSampler {
public:
    PatchSampler(const std::vector<SubjectPair>& data, Extent3 patch, std::uint64_t seed, unsigned flips);

    struct Batch {
        std::vector<Volume> lr, hr;
    };
    [[nodiscard]] Batch next(int count);
    [[nodiscard]] std::int64_t epoch() const noexcept { return epoch_; }

private:
    void reshuffle();

    const std::vector<SubjectPair>* data_;
    Extent3 patch_;
    unsigned flips_;
    std::mt19937_64 rng_;
    std::vector<std::size_t> order_;
    std::size_t pos_ = 0;
    std::int64_t epoch_ = 0;
};

// Unset numbers are NaN and print as empty CSV fields.
struct StepRow {
    std::int64_t step = 0;
    std::string phase;   // pretrain, critic_warmup, alternating, extra_critic
    std::string action;  // generator_step, critic_step
    double l1;
    double loss_gan;
    double em_estimate;
    double penalty;
    double lr = 0;
    double wall_ms;
    StepRow();
};

struct ValidationRow {
    std::int64_t step = 0;
    std::string phase;
    double l1 = 0;     // mean over subjects of mean |sr - hr|
    double nrmse = 0;  // mean over subjects, range-normalized
};

inline constexpr std::string_view metrics_header = "step,phase,action,l1,loss_gan,em_estimate,penalty,lr,wall_ms";
inline constexpr std::string_view validation_header = "step,phase,l1,nrmse";
[[nodiscard]] std::string csv_line(const StepRow& r);
[[nodiscard]] std::string csv_line(const ValidationRow& r);

// A loss turned NaN or infinite. The diagnostic checkpoint holds the
// parameters from before the failing update.
class NumericalError : public TrainError {
public:
    NumericalError(const std::string& what, std::int64_t step, std::filesystem::path checkpoint)
        : TrainError(what), step_(step), checkpoint_(std::move(checkpoint)) {}
    [[nodiscard]] std::int64_t step() const noexcept { return step_; }
    [[nodiscard]] const std::filesystem::path& checkpoint() const noexcept { return checkpoint_; }

private:
    std::int64_t step_;
    std::filesystem::path checkpoint_;
};

// With out_dir set: metrics.csv, validation.csv and checkpoints/{step}.ckpt
// (plus {step}.critic.ckpt in the GAN phase and final.ckpt copies).
struct TrainSink {
    std::optional<std::filesystem::path> out_dir;
    std::function<void(const StepRow&)> on_step;
    std::function<void(const ValidationRow&)> on_validation;
};

template <typename T>
struct TrainResult {
    models::ModelParams<T> generator;
    std::optional<models::ModelParams<T>> critic;
    std::vector<StepRow> steps;
    std::vector<ValidationRow> validation;
};

// Phase 1: pretrain_steps of L1 with Adam(lr_pretrain). Phase 2: gan_steps
// schedule actions with Adam(lr_gan); the critic minimizes critic_loss, the
// generator l1 + lambda_gan * gan. A missing critic is built from cfg.critic
// with seed cfg.seed + 1. Validation runs whole-volume inference.
template <typename T>
[[nodiscard]] TrainResult<T> train(const TrainConfig& cfg, models::ModelParams<T> generator,
                                   std::optional<models::ModelParams<T>> critic, const std::vector<SubjectPair>& train_set,
                                   const std::vector<SubjectPair>& validation_set, const TrainSink& sink = {});

// Mean |sr - hr| and range NRMSE of whole-volume inference, averaged over subjects.
template <typename T>
[[nodiscard]] ValidationRow validate(const models::ModelParams<T>& generator, const std::vector<SubjectPair>& data);

}  // namespace voxelsr::train
