#include "voxelsr/train/trainer.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <utility>

#include "json.hpp"
#include "voxelsr/metrics/metrics.hpp"
#include "voxelsr/models/checkpoint.hpp"
#include "voxelsr/train/infer.hpp"
#include "voxelsr/train/losses.hpp"

namespace voxelsr::train {

using nlohmann::json;

std::vector<SubjectPair> make_pairs(const std::vector<Volume>& hr, const kspace::Factors& factors,
                                    kspace::Interp interp) {
    std::vector<SubjectPair> out;
    out.reserve(hr.size());
    for (const auto& v : hr) out.push_back({kspace::lr_simulate(v, factors, interp), v});
    return out;
}

// ------------------------------------------------------------------- config

namespace {

std::string flips_string(unsigned f) {
    std::string s;
    if (f & patch::flip_d) s += 'd';
    if (f & patch::flip_h) s += 'h';
    if (f & patch::flip_w) s += 'w';
    return s;
}

unsigned parse_flips(const std::string& s) {
    unsigned f = patch::flip_none;
    for (char c : s) {
        switch (c) {
            case 'd': f |= patch::flip_d; break;
            case 'h': f |= patch::flip_h; break;
            case 'w': f |= patch::flip_w; break;
            default: throw TrainError("flips: expected a subset of \"dhw\", got \"" + s + "\"");
        }
    }
    return f;
}

// Reads `key` into `out` when present and erases it, so leftovers are unknown keys.
template <typename V>
void take(json& j, const char* key, V& out) {
    auto it = j.find(key);
    if (it == j.end()) return;
    try {
        out = it->get<V>();
    } catch (const json::exception& e) {
        throw TrainError(std::string("config key \"") + key + "\": " + e.what());
    }
    j.erase(it);
}

void reject_leftovers(const json& j, const std::string& where) {
    if (j.empty()) return;
    std::string keys;
    for (auto it = j.begin(); it != j.end(); ++it) keys += (keys.empty() ? "" : ", ") + it.key();
    throw TrainError("unknown " + where + " key(s): " + keys);
}

}  // namespace

void TrainConfig::validate() const {
    auto positive = [](double v, const char* name) {
        if (!(v > 0) || !std::isfinite(v)) throw TrainError(std::string(name) + " must be > 0");
    };
    positive(lr_pretrain, "lr_pretrain");
    positive(lr_gan, "lr_gan");
    if (!(lambda_gan >= 0)) throw TrainError("lambda_gan must be >= 0");
    if (!(lambda_gp >= 0)) throw TrainError("lambda_gp must be >= 0");
    if (batch_size < 1) throw TrainError("batch_size must be >= 1");
    if (pretrain_steps < 0 || gan_steps < 0) throw TrainError("step counts must be >= 0");
    if (checkpoint_every < 0 || validate_every < 0) throw TrainError("cadences must be >= 0");
    for (auto p : patch) {
        if (p < 1) throw TrainError("patch extents must be >= 1");
    }
    if (flips > patch::flip_all) throw TrainError("flips out of range");
    schedule.validate();
    if (!(adam.beta1 >= 0 && adam.beta1 < 1 && adam.beta2 >= 0 && adam.beta2 < 1 && adam.eps > 0)) {
        throw TrainError("adam: need 0 <= beta < 1 and eps > 0");
    }
    if (gan_steps > 0) {
        auto c = critic;
        c.patch = patch;
        c.validate();
    }
}

std::string TrainConfig::to_json() const {
    json j;
    j["lambda_gan"] = lambda_gan;
    j["lambda_gp"] = lambda_gp;
    j["lr_pretrain"] = lr_pretrain;
    j["lr_gan"] = lr_gan;
    j["batch_size"] = batch_size;
    j["pretrain_steps"] = pretrain_steps;
    j["gan_steps"] = gan_steps;
    j["schedule"] = {{"critic_warmup_steps", schedule.critic_warmup_steps},
                     {"critic_per_gen", schedule.critic_per_gen},
                     {"extra_critic_every", schedule.extra_critic_every},
                     {"extra_critic_steps", schedule.extra_critic_steps}};
    j["adam"] = {{"beta1", adam.beta1}, {"beta2", adam.beta2}, {"eps", adam.eps}};
    j["seed"] = seed;
    j["patch"] = patch;
    j["flips"] = flips_string(flips);
    j["critic"] = {{"base_width", critic.base_width},
                   {"stages", critic.stages},
                   {"dense_width", critic.dense_width},
                   {"leaky_slope", critic.leaky_slope}};
    j["checkpoint_every"] = checkpoint_every;
    j["validate_every"] = validate_every;
    j["log_wall_time"] = log_wall_time;
    return j.dump(2);
}

TrainConfig TrainConfig::from_json(std::string_view text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw TrainError(std::string("train config is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw TrainError("train config must be a JSON object");
    TrainConfig c;
    take(j, "lambda_gan", c.lambda_gan);
    take(j, "lambda_gp", c.lambda_gp);
    take(j, "lr_pretrain", c.lr_pretrain);
    take(j, "lr_gan", c.lr_gan);
    take(j, "batch_size", c.batch_size);
    take(j, "pretrain_steps", c.pretrain_steps);
    take(j, "gan_steps", c.gan_steps);
    take(j, "seed", c.seed);
    take(j, "patch", c.patch);
    std::string flips = flips_string(c.flips);
    take(j, "flips", flips);
    c.flips = parse_flips(flips);
    take(j, "checkpoint_every", c.checkpoint_every);
    take(j, "validate_every", c.validate_every);
    take(j, "log_wall_time", c.log_wall_time);
    if (auto it = j.find("schedule"); it != j.end()) {
        json s = *it;
        take(s, "critic_warmup_steps", c.schedule.critic_warmup_steps);
        take(s, "critic_per_gen", c.schedule.critic_per_gen);
        take(s, "extra_critic_every", c.schedule.extra_critic_every);
        take(s, "extra_critic_steps", c.schedule.extra_critic_steps);
        reject_leftovers(s, "schedule");
        j.erase(it);
    }
    if (auto it = j.find("adam"); it != j.end()) {
        json a = *it;
        take(a, "beta1", c.adam.beta1);
        take(a, "beta2", c.adam.beta2);
        take(a, "eps", c.adam.eps);
        reject_leftovers(a, "adam");
        j.erase(it);
    }
    if (auto it = j.find("critic"); it != j.end()) {
        json d = *it;
        take(d, "base_width", c.critic.base_width);
        take(d, "stages", c.critic.stages);
        take(d, "dense_width", c.critic.dense_width);
        take(d, "leaky_slope", c.critic.leaky_slope);
        reject_leftovers(d, "critic");
        j.erase(it);
    }
    reject_leftovers(j, "train config");
    c.validate();
    return c;
}

// ------------------------------------------------------------------ sampler

PatchSampler::PatchSampler(const std::vector<SubjectPair>& data, Extent3 patch, std::uint64_t seed, unsigned flips)
    : data_(&data), patch_(patch), flips_(flips), rng_(seed) {
    if (data.empty()) throw TrainError("no training subjects");
    for (const auto& p : data) {
        if (p.lr.shape != p.hr.shape) {
            throw TrainError("subject " + p.hr.subject_id + ": lr " + extent_str(p.lr.shape) + " and hr " +
                             extent_str(p.hr.shape) + " differ");
        }
        for (std::size_t a = 0; a < 3; ++a) {
            if (patch[a] > p.hr.shape[a]) {
                throw TrainError("patch " + extent_str(patch) + " exceeds subject " + p.hr.subject_id + " of shape " +
                                 extent_str(p.hr.shape));
            }
        }
    }
    order_.resize(data.size());
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    reshuffle();
}

void PatchSampler::reshuffle() {
    for (std::size_t i = order_.size() - 1; i > 0; --i) std::swap(order_[i], order_[rng_() % (i + 1)]);
    pos_ = 0;
}

PatchSampler::Batch PatchSampler::next(int count) {
    Batch b;
    for (int k = 0; k < count; ++k) {
        if (pos_ == order_.size()) {
            ++epoch_;
            reshuffle();
        }
        const auto& pair = (*data_)[order_[pos_++]];
        Extent3 origin{};
        for (std::size_t a = 0; a < 3; ++a) {
            origin[a] = static_cast<std::int64_t>(rng_() % static_cast<std::uint64_t>(pair.hr.shape[a] - patch_[a] + 1));
        }
        const std::uint64_t flip_seed = rng_();
        b.lr.push_back(patch::augment(patch::crop(pair.lr, origin, patch_), flip_seed, flips_));
        b.hr.push_back(patch::augment(patch::crop(pair.hr, origin, patch_), flip_seed, flips_));
    }
    return b;
}

// --------------------------------------------------------------------- rows

StepRow::StepRow() {
    const double nan = std::numeric_limits<double>::quiet_NaN();
    l1 = loss_gan = em_estimate = penalty = wall_ms = nan;
}

namespace {

std::string field(double v) { return std::isnan(v) ? std::string() : metrics::format_number(v); }

}  // namespace

std::string csv_line(const StepRow& r) {
    return std::to_string(r.step) + "," + r.phase + "," + r.action + "," + field(r.l1) + "," + field(r.loss_gan) + "," +
           field(r.em_estimate) + "," + field(r.penalty) + "," + field(r.lr) + "," + field(r.wall_ms);
}

std::string csv_line(const ValidationRow& r) {
    return std::to_string(r.step) + "," + r.phase + "," + field(r.l1) + "," + field(r.nrmse);
}

// --------------------------------------------------------------- validation

template <typename T>
ValidationRow validate(const models::ModelParams<T>& generator, const std::vector<SubjectPair>& data) {
    ValidationRow row;
    if (data.empty()) return row;
    for (const auto& p : data) {
        InferOptions opt;
        opt.patch = p.lr.shape;
        opt.margin = 0;
        const Volume sr = super_resolve(generator, p.lr, opt);
        double l1 = 0.0;
        for (std::size_t i = 0; i < sr.data.size(); ++i) l1 += std::abs(sr.data[i] - p.hr.data[i]);
        row.l1 += l1 / static_cast<double>(sr.data.size());
        row.nrmse += metrics::nrmse(p.hr, sr);
    }
    row.l1 /= static_cast<double>(data.size());
    row.nrmse /= static_cast<double>(data.size());
    return row;
}

// -------------------------------------------------------------------- train

namespace {

template <typename T>
void fill_unreachable(const models::ModelParams<T>& params, ad::GradMap<T>& grads) {
    for (const auto& e : params.entries()) {
        if (!grads.contains(e.value)) grads.insert(e.value, ad::Tensor<T>::zeros(e.value.shape()));
    }
}

template <typename T>
double mean_abs_diff(const ad::Tensor<T>& a, const ad::Tensor<T>& b) {
    auto va = a.values();
    auto vb = b.values();
    double s = 0.0;
    for (std::size_t i = 0; i < va.size(); ++i) s += std::abs(static_cast<double>(va[i]) - vb[i]);
    return s / static_cast<double>(va.size());
}

template <typename T>
double mean_value(const ad::Tensor<T>& t) {
    double s = 0.0;
    for (T v : t.values()) s += v;
    return s / static_cast<double>(t.numel());
}

template <typename T>
class Run {
public:
    Run(const TrainConfig& cfg, models::ModelParams<T> generator, std::optional<models::ModelParams<T>> critic,
        const std::vector<SubjectPair>& train_set, const std::vector<SubjectPair>& validation_set,
        const TrainSink& sink)
        : cfg_(cfg),
          sink_(sink),
          validation_set_(validation_set),
          sampler_(train_set, cfg.patch, cfg.seed, cfg.flips),
          eps_rng_(cfg.seed ^ 0x9e3779b97f4a7c15ULL) {
        result_.generator = std::move(generator);
        result_.critic = std::move(critic);
        if (sink_.out_dir) {
            std::filesystem::create_directories(*sink_.out_dir / "checkpoints");
            metrics_.open(*sink_.out_dir / "metrics.csv");
            validation_.open(*sink_.out_dir / "validation.csv");
            if (!metrics_ || !validation_) throw TrainError("cannot write logs under " + sink_.out_dir->string());
            metrics_ << metrics_header << '\n';
            validation_ << validation_header << '\n';
        }
    }

    TrainResult<T> run() {
        auto& g = result_.generator;
        g.set_requires_grad(true);
        const std::int64_t last = cfg_.pretrain_steps + cfg_.gan_steps;
        validate_now(cfg_.pretrain_steps > 0 ? "pretrain" : "gan");
        AdamState adam_g{{}, {}, 0, cfg_.adam};
        for (std::int64_t i = 0; i < cfg_.pretrain_steps; ++i) {
            ++step_;
            pretrain_step(adam_g);
            after_step("pretrain", last);
        }
        if (cfg_.gan_steps > 0) {
            if (!result_.critic) {
                auto c = cfg_.critic;
                c.patch = cfg_.patch;
                result_.critic = models::build_discriminator<T>(c, cfg_.seed + 1);
            }
            result_.critic->set_requires_grad(true);
            AdamState adam_d{{}, {}, 0, cfg_.adam};
            adam_g = AdamState{{}, {}, 0, cfg_.adam};
            GanSchedule schedule;
            for (std::int64_t i = 0; i < cfg_.gan_steps; ++i) {
                ++step_;
                const auto next = schedule_next(schedule, cfg_.schedule);
                schedule = next.next;
                if (next.action == Action::critic_step) {
                    critic_step(adam_d, to_string(next.phase));
                } else {
                    generator_step(adam_g, to_string(next.phase));
                }
                after_step("gan", last);
            }
        }
        if (last == 0) save_checkpoints(true);
        return std::move(result_);
    }

private:
    using Clock = std::chrono::steady_clock;

    struct Tensors {
        ad::Tensor<T> lr, hr;
    };

    Tensors next_batch() {
        auto b = sampler_.next(cfg_.batch_size);
        return {to_batch<T>(b.lr), to_batch<T>(b.hr)};
    }

    void pretrain_step(AdamState& adam) {
        const auto start = Clock::now();
        auto& g = result_.generator;
        auto [lr, hr] = next_batch();
        auto loss = l1_loss(models::generator_forward(g, lr, models::NormUse::train), hr);
        check_finite(loss.item(), "l1 loss");
        auto grads = ad::backward(loss);
        fill_unreachable(g, grads);
        adam_step(g, grads, adam, cfg_.lr_pretrain);
        StepRow row;
        row.phase = "pretrain";
        row.action = to_string(Action::generator_step);
        row.l1 = loss.item();
        row.lr = cfg_.lr_pretrain;
        emit(row, start);
    }

    void critic_step(AdamState& adam, const std::string& phase) {
        const auto start = Clock::now();
        auto& d = *result_.critic;
        auto [lr, hr] = next_batch();
        ad::Tensor<T> sr;
        {
            ad::NoGradGuard no_grad;
            sr = models::generator_forward(std::as_const(result_.generator), lr, models::NormUse::batch_only);
        }
        std::vector<double> eps(static_cast<std::size_t>(cfg_.batch_size));
        for (auto& e : eps) e = static_cast<double>(eps_rng_() >> 11) * 0x1.0p-53;
        const Critic<T> critic = [&d](const ad::Tensor<T>& x) { return models::discriminator_forward(d, x); };
        auto cl = critic_loss(critic, hr, sr, cfg_.lambda_gp, eps);
        check_finite(cl.total.item(), "critic loss");
        auto grads = ad::backward(cl.total);
        fill_unreachable(d, grads);
        adam_step(d, grads, adam, cfg_.lr_gan);
        StepRow row;
        row.phase = phase;
        row.action = to_string(Action::critic_step);
        row.l1 = mean_abs_diff(sr, hr);
        row.em_estimate = -cl.em_term;
        row.penalty = cl.penalty;
        row.lr = cfg_.lr_gan;
        emit(row, start);
    }

    void generator_step(AdamState& adam, const std::string& phase) {
        const auto start = Clock::now();
        auto& g = result_.generator;
        auto& d = *result_.critic;
        auto [lr, hr] = next_batch();
        d.set_requires_grad(false);
        auto sr = models::generator_forward(g, lr, models::NormUse::train);
        auto scores = models::discriminator_forward(d, sr);
        auto l1 = l1_loss(sr, hr);
        auto gan = gan_generator_loss(scores);
        auto total = combined_loss(l1, gan, cfg_.lambda_gan);
        check_finite(total.item(), "generator loss");
        auto grads = ad::backward(total);
        fill_unreachable(g, grads);
        adam_step(g, grads, adam, cfg_.lr_gan);
        double hr_mean = 0.0;
        {
            ad::NoGradGuard no_grad;
            hr_mean = mean_value(models::discriminator_forward(d, hr));
        }
        d.set_requires_grad(true);
        StepRow row;
        row.phase = phase;
        row.action = to_string(Action::generator_step);
        row.l1 = l1.item();
        row.loss_gan = gan.item();
        row.em_estimate = hr_mean - mean_value(scores);
        row.lr = cfg_.lr_gan;
        emit(row, start);
    }

    void after_step(const char* phase, std::int64_t last) {
        const bool final = step_ == last;
        if (final || (cfg_.validate_every > 0 && step_ % cfg_.validate_every == 0)) validate_now(phase);
        if (final || (cfg_.checkpoint_every > 0 && step_ % cfg_.checkpoint_every == 0)) save_checkpoints(final);
    }

    void emit(StepRow row, Clock::time_point start) {
        row.step = step_;
        if (cfg_.log_wall_time) row.wall_ms = std::chrono::duration<double, std::milli>(Clock::now() - start).count();
        if (metrics_.is_open()) metrics_ << csv_line(row) << '\n' << std::flush;
        if (sink_.on_step) sink_.on_step(row);
        result_.steps.push_back(std::move(row));
    }

    void validate_now(const char* phase) {
        if (validation_set_.empty()) return;
        auto row = validate(result_.generator, validation_set_);
        row.step = step_;
        row.phase = phase;
        if (validation_.is_open()) validation_ << csv_line(row) << '\n' << std::flush;
        if (sink_.on_validation) sink_.on_validation(row);
        result_.validation.push_back(std::move(row));
    }

    void save_checkpoints(bool final) {
        if (!sink_.out_dir) return;
        const auto dir = *sink_.out_dir / "checkpoints";
        const std::string stem = std::to_string(step_);
        models::save_checkpoint(dir / (stem + ".ckpt"), result_.generator, step_);
        if (result_.critic) models::save_checkpoint(dir / (stem + ".critic.ckpt"), *result_.critic, step_);
        if (!final) return;
        models::save_checkpoint(dir / "final.ckpt", result_.generator, step_);
        if (result_.critic) models::save_checkpoint(dir / "final.critic.ckpt", *result_.critic, step_);
    }

    void check_finite(double value, const char* what) {
        if (std::isfinite(value)) return;
        std::filesystem::path path;
        if (sink_.out_dir) {
            const auto dir = *sink_.out_dir / "checkpoints";
            path = dir / (std::to_string(step_) + ".nonfinite.ckpt");
            models::save_checkpoint(path, result_.generator, step_);
            if (result_.critic) {
                models::save_checkpoint(dir / (std::to_string(step_) + ".nonfinite.critic.ckpt"), *result_.critic,
                                        step_);
            }
        }
        throw NumericalError(std::string(what) + " is " + (std::isnan(value) ? "NaN" : "infinite") + " at step " +
                                 std::to_string(step_) +
                                 (path.empty() ? std::string() : "; parameters saved to " + path.string()),
                             step_, path);
    }

    const TrainConfig& cfg_;
    const TrainSink& sink_;
    const std::vector<SubjectPair>& validation_set_;
    PatchSampler sampler_;
    std::mt19937_64 eps_rng_;
    TrainResult<T> result_;
    std::int64_t step_ = 0;
    std::ofstream metrics_, validation_;
};

}  // namespace

template <typename T>
TrainResult<T> train(const TrainConfig& cfg, models::ModelParams<T> generator,
                     std::optional<models::ModelParams<T>> critic, const std::vector<SubjectPair>& train_set,
                     const std::vector<SubjectPair>& validation_set, const TrainSink& sink) {
    cfg.validate();
    if (!std::holds_alternative<models::GeneratorConfig>(generator.config())) {
        throw TrainError("train: generator parameters were not built for a generator");
    }
    if (critic) {
        const auto* dc = std::get_if<models::DiscriminatorConfig>(&critic->config());
        if (!dc) throw TrainError("train: critic parameters were not built for a critic");
        if (dc->patch != cfg.patch) {
            throw TrainError("train: critic patch " + extent_str(dc->patch) + " differs from training patch " +
                             extent_str(cfg.patch));
        }
    }
    return Run<T>(cfg, std::move(generator), std::move(critic), train_set, validation_set, sink).run();
}

#define VOXELSR_INSTANTIATE_TRAIN(T)                                                                              \
    template TrainResult<T> train<T>(const TrainConfig&, models::ModelParams<T>,                                \
                                     std::optional<models::ModelParams<T>>, const std::vector<SubjectPair>&,   \
                                     const std::vector<SubjectPair>&, const TrainSink&);                       \
    template ValidationRow validate<T>(const models::ModelParams<T>&, const std::vector<SubjectPair>&);

VOXELSR_INSTANTIATE_TRAIN(float)
VOXELSR_INSTANTIATE_TRAIN(double)

}  // namespace voxelsr::train
