#include "voxelsr/train/losses.hpp"

#include "voxelsr/autodiff/engine.hpp"

namespace voxelsr::train {

using ad::Tensor;

namespace {

template <typename T>
void require_same(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
    if (a.shape() != b.shape()) {
        throw ad::ShapeError(std::string(what) + ": shapes " + a.shape().str() + " and " + b.shape().str() + " differ");
    }
}

template <typename T>
void require_scores(const Tensor<T>& s, std::int64_t n) {
    if (s.shape().rank() != 1 || s.shape()[0] != n) {
        throw ad::ShapeError("critic must return one score per item, got " + s.shape().str());
    }
}

}  // namespace

template <typename T>
Tensor<T> l1_loss(const Tensor<T>& sr, const Tensor<T>& hr) {
    require_same(sr, hr, "l1_loss");
    return ad::mean(ad::abs(ad::sub(sr, hr)));
}

template <typename T>
Tensor<T> gan_generator_loss(const Tensor<T>& critic_scores) {
    return ad::neg(ad::mean(critic_scores));
}

template <typename T>
Tensor<T> combined_loss(const Tensor<T>& l1, const Tensor<T>& gan, double lambda_gan) {
    return ad::add(l1, ad::mul_scalar(gan, lambda_gan));
}

template <typename T>
Tensor<T> gradient_penalty(const Critic<T>& critic, const Tensor<T>& hr, const Tensor<T>& sr,
                           std::span<const double> epsilons) {
    require_same(hr, sr, "gradient_penalty");
    const std::int64_t n = hr.shape()[0];
    if (static_cast<std::int64_t>(epsilons.size()) != n) {
        throw ad::ShapeError("gradient_penalty: need one epsilon per item (" + std::to_string(n) + "), got " +
                             std::to_string(epsilons.size()));
    }
    const auto h = hr.values();
    const auto s = sr.values();
    const std::int64_t per = hr.numel() / n;
    std::vector<T> mix(h.size());
    for (std::int64_t i = 0; i < n; ++i) {
        const double e = epsilons[static_cast<std::size_t>(i)];
        for (std::int64_t j = i * per; j < (i + 1) * per; ++j) {
            const auto k = static_cast<std::size_t>(j);
            mix[k] = static_cast<T>(e * static_cast<double>(h[k]) + (1.0 - e) * static_cast<double>(s[k]));
        }
    }
    // The input gradient needs a recorded graph even when the caller has
    // gradients off; the result is then handed back detached.
    const bool outer = ad::grad_enabled();
    ad::GradModeGuard on(true);
    Tensor<T> xhat(hr.shape(), std::move(mix));
    xhat.set_requires_grad(true);
    const Tensor<T> scores = critic(xhat);
    require_scores(scores, n);
    const Tensor<T> g = ad::grad(ad::sum(scores), xhat, outer, ad::Unreachable::zero);
    const Tensor<T> norms = ad::sqrt(ad::sum_axis(ad::square(g), 0));
    const Tensor<T> gp = ad::mean(ad::square(ad::add_scalar(norms, -1.0)));
    return outer ? gp : gp.detach();
}

template <typename T>
CriticLoss<T> critic_loss(const Critic<T>& critic, const Tensor<T>& hr, const Tensor<T>& sr, double lambda_gp,
                          std::span<const double> epsilons) {
    require_same(hr, sr, "critic_loss");
    const Tensor<T> fake = critic(sr);
    const Tensor<T> real = critic(hr);
    require_scores(fake, sr.shape()[0]);
    require_scores(real, hr.shape()[0]);
    const Tensor<T> em = ad::sub(ad::mean(fake), ad::mean(real));
    const Tensor<T> gp = gradient_penalty(critic, hr, sr, epsilons);
    CriticLoss<T> out;
    out.total = ad::add(em, ad::mul_scalar(gp, lambda_gp));
    out.em_term = static_cast<double>(em.item());
    out.penalty = static_cast<double>(gp.item());
    return out;
}

template <typename T>
double em_distance_estimate(const Critic<T>& critic, const Tensor<T>& hr, const Tensor<T>& sr) {
    ad::NoGradGuard no_grad;
    const Tensor<T> real = critic(hr);
    const Tensor<T> fake = critic(sr);
    require_scores(real, hr.shape()[0]);
    require_scores(fake, sr.shape()[0]);
    double mr = 0, mf = 0;
    for (T v : real.values()) mr += static_cast<double>(v);
    for (T v : fake.values()) mf += static_cast<double>(v);
    return mr / static_cast<double>(real.numel()) - mf / static_cast<double>(fake.numel());
}

#define VOXELSR_INSTANTIATE(T)                                                                                    \
    template Tensor<T> l1_loss<T>(const Tensor<T>&, const Tensor<T>&);                                            \
    template Tensor<T> gan_generator_loss<T>(const Tensor<T>&);                                                   \
    template Tensor<T> combined_loss<T>(const Tensor<T>&, const Tensor<T>&, double);                              \
    template Tensor<T> gradient_penalty<T>(const Critic<T>&, const Tensor<T>&, const Tensor<T>&,                  \
                                           std::span<const double>);                                              \
    template CriticLoss<T> critic_loss<T>(const Critic<T>&, const Tensor<T>&, const Tensor<T>&, double,           \
                                          std::span<const double>);                                               \
    template double em_distance_estimate<T>(const Critic<T>&, const Tensor<T>&, const Tensor<T>&);
VOXELSR_INSTANTIATE(float)
VOXELSR_INSTANTIATE(double)
#undef VOXELSR_INSTANTIATE

}  // namespace voxelsr::train
