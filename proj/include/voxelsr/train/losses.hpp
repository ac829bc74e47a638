#pragma once

#include <functional>
#include <span>

#include "voxelsr/autodiff/ops.hpp"

namespace voxelsr::train {

// Maps a batch (N, ...) to one score per item, shape (N).
template <typename T>
using Critic = std::function<ad::Tensor<T>(const ad::Tensor<T>&)>;

// Mean absolute difference over every element.
template <typename T>
[[nodiscard]] ad::Tensor<T> l1_loss(const ad::Tensor<T>& sr, const ad::Tensor<T>& hr);

// -mean(scores).
template <typename T>
[[nodiscard]] ad::Tensor<T> gan_generator_loss(const ad::Tensor<T>& critic_scores);

// l1 + lambda_gan * gan.
template <typename T>
[[nodiscard]] ad::Tensor<T> combined_loss(const ad::Tensor<T>& l1, const ad::Tensor<T>& gan, double lambda_gan);

// mean_i (||grad critic(xhat_i)||_2 - 1)^2 with xhat_i = eps_i hr_i + (1 - eps_i) sr_i.
// hr and sr are treated as constants; the result is differentiable with
// respect to whatever the critic closes over. A critic that ignores its input
// has zero gradient (penalty 1). Under NoGradGuard the value is still exact,
// only the result carries no graph.
template <typename T>
[[nodiscard]] ad::Tensor<T> gradient_penalty(const Critic<T>& critic, const ad::Tensor<T>& hr, const ad::Tensor<T>& sr,
                                             std::span<const double> epsilons);

template <typename T>
struct CriticLoss {
    ad::Tensor<T> total;  // mean D(sr) - mean D(hr) + lambda_gp * penalty
    double em_term = 0;   // mean D(sr) - mean D(hr)
    double penalty = 0;
};

template <typename T>
[[nodiscard]] CriticLoss<T> critic_loss(const Critic<T>& critic, const ad::Tensor<T>& hr, const ad::Tensor<T>& sr,
                                        double lambda_gp, std::span<const double> epsilons);

// mean D(hr) - mean D(sr), without recording a graph.
template <typename T>
[[nodiscard]] double em_distance_estimate(const Critic<T>& critic, const ad::Tensor<T>& hr, const ad::Tensor<T>& sr);

}  // namespace voxelsr::train
