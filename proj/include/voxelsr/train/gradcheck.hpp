#pragma once

#include <functional>
#include <string>
#include <vector>

namespace voxelsr::train {

struct GradcheckCase {
    std::string name;
    int order = 1;  // 2 for gradients of gradient-norm penalties
    double error = 0;
    double tolerance = 0;
    std::size_t coordinates = 0;  // finite-difference probes taken
    [[nodiscard]] bool passed() const { return error <= tolerance; }
};

enum class GradcheckSize {
    small,  // probes a seeded subset of coordinates per tensor
    full,   // probes every coordinate
};

inline constexpr double first_order_tolerance = 1e-4;
inline constexpr double second_order_tolerance = 1e-3;

// Central-difference checks in 64-bit over the autodiff ops, a b1u2:k4
// generator, a small critic, and the critic's gradient penalty. The error of a
// case is max |analytic - numeric| / max |numeric| over its probes.
[[nodiscard]] std::vector<GradcheckCase> run_gradcheck(GradcheckSize size,
                                                       const std::function<void(const GradcheckCase&)>& progress = {});

}  // namespace voxelsr::train
