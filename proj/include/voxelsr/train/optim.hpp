#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "voxelsr/autodiff/engine.hpp"
#include "voxelsr/models/network.hpp"

namespace voxelsr::train {

class TrainError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Moments are kept in double for either parameter width.
struct AdamState {
    std::vector<std::vector<double>> m, v;
    std::int64_t t = 0;
    AdamConfig hyper;
};

// One bias-corrected Adam update of every parameter. Throws TrainError when a
// parameter has no gradient in `grads`.
template <typename T>
void adam_step(models::ModelParams<T>& params, const ad::GradMap<T>& grads, AdamState& state, double lr);

enum class Action { critic_step, generator_step };
enum class SchedulePhase { critic_warmup, alternating, extra_critic };

[[nodiscard]] std::string to_string(Action a);
[[nodiscard]] std::string to_string(SchedulePhase p);

struct ScheduleConfig {
    std::int64_t critic_warmup_steps = 10000;
    std::int64_t critic_per_gen = 7;
    std::int64_t extra_critic_every = 500;
    std::int64_t extra_critic_steps = 200;

    void validate() const;
};

struct GanSchedule {
    std::int64_t total = 0;
    std::int64_t critic = 0;
    std::int64_t generator = 0;
    std::int64_t phase2 = 0;           // actions taken after warmup, extra runs included
    std::int64_t extra_remaining = 0;  // critic steps left in the current extra run
    std::int64_t cycle = 0;            // position in the [critic x k, generator] cycle
};

struct Scheduled {
    Action action;
    SchedulePhase phase;  // phase the action belongs to
    GanSchedule next;
};

// Warmup: critic steps until `critic_warmup_steps` critic steps were taken.
// Then the cycle of critic_per_gen critic steps and one generator step. Each
// time the phase-2 action count reaches a multiple of extra_critic_every, a
// run of extra_critic_steps critic steps is inserted; the cycle position is
// kept across the run.
[[nodiscard]] Scheduled schedule_next(const GanSchedule& s, const ScheduleConfig& cfg);

}  // namespace voxelsr::train
