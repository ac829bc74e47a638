#include "voxelsr/train/optim.hpp"

#include <cmath>

namespace voxelsr::train {

template <typename T>
void adam_step(models::ModelParams<T>& params, const ad::GradMap<T>& grads, AdamState& state, double lr) {
    const auto& entries = params.entries();
    if (state.m.empty()) {
        state.m.resize(entries.size());
        state.v.resize(entries.size());
        for (std::size_t i = 0; i < entries.size(); ++i) {
            state.m[i].assign(static_cast<std::size_t>(entries[i].value.numel()), 0.0);
            state.v[i].assign(static_cast<std::size_t>(entries[i].value.numel()), 0.0);
        }
    }
    if (state.m.size() != entries.size()) throw TrainError("Adam state does not match the parameter set");
    for (const auto& e : entries) {
        if (!grads.contains(e.value)) throw TrainError("no gradient for parameter " + e.name);
    }
    state.t += 1;
    const auto& h = state.hyper;
    const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.t));
    const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.t));
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const auto g = grads.at(entries[i].value).values();
        auto& m = state.m[i];
        auto& v = state.v[i];
        if (g.size() != m.size()) throw TrainError("gradient shape mismatch for " + entries[i].name);
        std::vector<T> p = entries[i].value.to_vector();
        for (std::size_t j = 0; j < p.size(); ++j) {
            const double gj = static_cast<double>(g[j]);
            m[j] = h.beta1 * m[j] + (1.0 - h.beta1) * gj;
            v[j] = h.beta2 * v[j] + (1.0 - h.beta2) * gj * gj;
            const double step = lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + h.eps);
            p[j] = static_cast<T>(static_cast<double>(p[j]) - step);
        }
        ad::Tensor<T> next(entries[i].value.shape(), std::move(p));
        next.set_requires_grad(entries[i].value.requires_grad());
        params.set(i, std::move(next));
    }
}

template void adam_step<float>(models::ModelParams<float>&, const ad::GradMap<float>&, AdamState&, double);
template void adam_step<double>(models::ModelParams<double>&, const ad::GradMap<double>&, AdamState&, double);

std::string to_string(Action a) { return a == Action::critic_step ? "critic_step" : "generator_step"; }

std::string to_string(SchedulePhase p) {
    switch (p) {
        case SchedulePhase::critic_warmup: return "critic_warmup";
        case SchedulePhase::alternating: return "alternating";
        case SchedulePhase::extra_critic: return "extra_critic";
    }
    return "?";
}

void ScheduleConfig::validate() const {
    if (critic_warmup_steps < 0) throw TrainError("critic_warmup_steps must be >= 0");
    if (critic_per_gen < 1) throw TrainError("critic_per_gen must be >= 1");
    if (extra_critic_every < 1) throw TrainError("extra_critic_every must be >= 1");
    if (extra_critic_steps < 0) throw TrainError("extra_critic_steps must be >= 0");
}

Scheduled schedule_next(const GanSchedule& s, const ScheduleConfig& cfg) {
    Scheduled out{Action::critic_step, SchedulePhase::critic_warmup, s};
    GanSchedule& n = out.next;
    n.total += 1;
    if (s.critic < cfg.critic_warmup_steps && s.phase2 == 0) {
        n.critic += 1;
        return out;
    }
    if (s.extra_remaining > 0) {
        out.phase = SchedulePhase::extra_critic;
        n.extra_remaining -= 1;
    } else {
        out.phase = SchedulePhase::alternating;
        if (s.cycle == cfg.critic_per_gen) out.action = Action::generator_step;
        n.cycle = (s.cycle + 1) % (cfg.critic_per_gen + 1);
    }
    if (out.action == Action::critic_step) {
        n.critic += 1;
    } else {
        n.generator += 1;
    }
    n.phase2 += 1;
    if (n.phase2 % cfg.extra_critic_every == 0) n.extra_remaining += cfg.extra_critic_steps;
    return out;
}

}  // namespace voxelsr::train
