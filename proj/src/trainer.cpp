#include "sdm/trainer.hpp"

#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>
#include <stdexcept>

#include <ATen/CPUGeneratorImpl.h>

#include "sdm/checkpoint.hpp"
#include "sdm/sampler.hpp"

namespace sdm {

std::string to_string(DropoutPhase p) {
    return p == DropoutPhase::from_scratch ? "from_scratch" : "finetune_only";
}

DropoutPhase dropout_phase_from_string(const std::string& s) {
    if (s == "from_scratch") return DropoutPhase::from_scratch;
    if (s == "finetune_only") return DropoutPhase::finetune_only;
    throw std::invalid_argument("unknown dropout phase '" + s + "' (expected from_scratch or finetune_only)");
}

int64_t TrainConfig::dropout_start() const {
    if (dropout_phase == DropoutPhase::from_scratch) return 0;
    if (finetune_start_step >= 0) return finetune_start_step;
    return static_cast<int64_t>(std::llround(0.7 * static_cast<double>(total_steps)));
}

void TrainConfig::validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("TrainConfig: " + m); };
    if (batch_size < 1) fail("batch_size must be positive");
    if (total_steps < 0) fail("total_steps must be non-negative");
    if (learning_rate < 0) fail("learning_rate must be non-negative");
    if (weight_decay < 0) fail("weight_decay must be non-negative");
    if (lambda_vlb < 0) fail("lambda_vlb must be non-negative");
    if (ema_decay < 0 || ema_decay > 1) fail("ema_decay must lie in [0, 1]");
    if (dropout_prob < 0 || dropout_prob > 1) fail("dropout_prob must lie in [0, 1]");
    if (checkpoint_every < 1) fail("checkpoint_every must be positive");
}

DiffusionConfig DiffusionConfig::scaled_default(int num_steps) {
    const auto s = default_linear_schedule(num_steps);
    return DiffusionConfig{num_steps, s.beta_start(), s.beta_end()};
}

// ---------------------------------------------------------------------------

AdamW::AdamW(std::vector<torch::Tensor> params, double lr, double weight_decay, double beta1, double beta2,
             double eps)
    : params_(std::move(params)), lr_(lr), weight_decay_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& p : params_) {
        m_.push_back(torch::zeros_like(p));
        v_.push_back(torch::zeros_like(p));
    }
}

void AdamW::zero_grad() {
    for (auto& p : params_) {
        if (p.grad().defined()) p.mutable_grad().zero_();
    }
}

void AdamW::step() {
    torch::NoGradGuard guard;
    ++step_count_;
    const double bias1 = 1.0 - std::pow(beta1_, static_cast<double>(step_count_));
    const double bias2 = 1.0 - std::pow(beta2_, static_cast<double>(step_count_));
    for (size_t i = 0; i < params_.size(); ++i) {
        auto& p = params_[i];
        if (!p.grad().defined()) continue;
        const auto& g = p.grad();
        if (weight_decay_ != 0.0) p.mul_(1.0 - lr_ * weight_decay_);
        m_[i].mul_(beta1_).add_(g, 1.0 - beta1_);
        v_[i].mul_(beta2_).addcmul_(g, g, 1.0 - beta2_);
        const auto denom = (v_[i] / bias2).sqrt_().add_(eps_);
        p.addcdiv_(m_[i], denom, -lr_ / bias1);
    }
}

void ema_update(const std::vector<torch::Tensor>& ema, const std::vector<torch::Tensor>& current, double decay) {
    if (ema.size() != current.size()) throw std::invalid_argument("ema_update: parameter count mismatch");
    if (decay < 0.0 || decay > 1.0) throw std::invalid_argument("ema_update: decay must lie in [0, 1]");
    torch::NoGradGuard guard;
    for (size_t i = 0; i < ema.size(); ++i) {
        if (ema[i].sizes() != current[i].sizes()) throw std::invalid_argument("ema_update: shape mismatch");
        if (decay == 1.0) continue;
        if (decay == 0.0) {
            ema[i].copy_(current[i]);
            continue;
        }
        ema[i].mul_(decay).add_(current[i], 1.0 - decay);
    }
}

TrainState TrainState::create(const ModelConfig& model, const TrainConfig& train, const DiffusionConfig& diffusion,
                              const SceneSpec& scene) {
    train.validate();
    TrainState state;
    state.model_config = model;
    state.train_config = train;
    state.diffusion = diffusion;
    state.scene_spec = scene;
    torch::manual_seed(derive_seed(train.seed, 0xC0FFEE));
    state.model = UNet(model);
    state.ema = UNet(model);
    {
        torch::NoGradGuard guard;
        auto src = state.model->parameters();
        auto dst = state.ema->parameters();
        for (size_t i = 0; i < src.size(); ++i) dst[i].copy_(src[i]);
    }
    for (auto& p : state.ema->parameters()) p.set_requires_grad(false);
    state.optimizer = std::make_unique<AdamW>(state.model->parameters(), train.learning_rate, train.weight_decay);
    return state;
}

StepRng::StepRng(uint64_t seed, int64_t step)
    : engine(derive_seed(seed, static_cast<uint64_t>(step))),
      noise(at::make_generator<at::CPUGeneratorImpl>(derive_seed(seed ^ 0x5DEECE66DULL, static_cast<uint64_t>(step)))) {}

Batch make_batch(const Dataset& dataset, const std::vector<size_t>& indices) {
    std::vector<torch::Tensor> images, conds;
    for (auto i : indices) {
        const auto& scene = dataset.scenes.at(i);
        images.push_back(scene.image);
        conds.push_back(scene.layout.condition());
    }
    return Batch{torch::stack(images, 0), torch::stack(conds, 0)};
}

StepStats train_step(TrainState& state, const Batch& batch, const NoiseSchedule& schedule, StepRng& rng) {
    const auto& cfg = state.train_config;
    const auto b = batch.images.size(0);
    StepStats stats;

    std::uniform_int_distribution<int> pick_t(1, schedule.num_steps());
    stats.timesteps.resize(b);
    for (auto& t : stats.timesteps) t = pick_t(rng.engine);

    auto conditions = batch.conditions.clone();
    const bool dropout_active = state.step >= cfg.dropout_start();
    if (dropout_active && cfg.dropout_prob > 0.0) {
        for (int64_t i = 0; i < b; ++i) {
            if (should_drop_label(cfg.dropout_prob, rng.engine)) {
                conditions[i].zero_();
                ++stats.dropped_layouts;
            }
        }
    }

    const auto& images = batch.images;
    const auto eps = at::normal(0.0, 1.0, images.sizes(), rng.noise, images.options());
    const auto y_t = q_sample(images, stats.timesteps, eps, schedule);

    state.model->train();
    std::vector<int> model_ts(b);
    for (int64_t i = 0; i < b; ++i) model_ts[i] = schedule.model_timestep(stats.timesteps[i]);
    const auto out = state.model->forward(y_t, conditions, model_ts);
    const auto terms = total_loss(eps, out, y_t, images, stats.timesteps, schedule, cfg.lambda_vlb);
    stats.loss = terms.breakdown();
    if (!std::isfinite(stats.loss.total)) {
        std::ostringstream msg;
        msg << "non-finite loss at step " << state.step << " (simple=" << stats.loss.simple
            << ", vlb=" << stats.loss.vlb << ", total=" << stats.loss.total << ", t=[";
        for (size_t i = 0; i < stats.timesteps.size(); ++i) msg << (i ? "," : "") << stats.timesteps[i];
        msg << "])";
        throw std::runtime_error(msg.str());
    }

    state.optimizer->zero_grad();
    terms.total.backward();
    auto params = state.model->parameters();
    if (cfg.grad_clip > 0.0) {
        stats.grad_norm = torch::nn::utils::clip_grad_norm_(params, cfg.grad_clip);
    }
    state.optimizer->step();

    double decay = cfg.ema_decay;
    if (cfg.ema_warmup) {
        const double n = static_cast<double>(state.step);
        decay = std::min(decay, (1.0 + n) / (10.0 + n));
    }
    ema_update(state.ema->parameters(), params, decay);
    ++state.step;
    return stats;
}

TrainState run_training(const ModelConfig& model, const TrainConfig& train, const DiffusionConfig& diffusion,
                        const Dataset& dataset, const std::filesystem::path& out_dir, const RunOptions& options) {
    if (dataset.size() == 0) throw std::invalid_argument("run_training: empty dataset");
    model.validate();
    train.validate();
    if (dataset.spec.image_size != model.image_size || dataset.spec.num_classes != model.num_classes ||
        dataset.spec.use_edge_map != model.use_edge_map) {
        throw std::invalid_argument("run_training: dataset geometry does not match the model config");
    }

    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw std::runtime_error("cannot create " + out_dir.string() + ": " + ec.message());
    const auto ckpt_path = out_dir / "checkpoint.sdm";
    const auto log_path = out_dir / "loss.log";

    TrainState state;
    if (options.resume_from) {
        state = state_from_checkpoint(load_checkpoint(*options.resume_from));
        if (!(state.model_config == model)) {
            throw std::invalid_argument("run_training: checkpoint model config differs from the requested one");
        }
        state.train_config = train;
        state.optimizer->set_learning_rate(train.learning_rate);
    } else {
        state = TrainState::create(model, train, diffusion, dataset.spec);
    }
    const auto schedule = state.diffusion.build();

    std::ofstream log(log_path, options.resume_from ? std::ios::app : std::ios::trunc);
    if (!log) throw std::runtime_error("cannot open loss log " + log_path.string());
    log.precision(10);

    const int64_t stop = std::min(train.total_steps, options.stop_after.value_or(train.total_steps));
    if (state.step >= stop) {
        save_checkpoint(checkpoint_from_state(state), ckpt_path);
        return state;
    }
    while (state.step < stop) {
        StepRng rng(train.seed, state.step);
        std::uniform_int_distribution<size_t> pick(0, dataset.size() - 1);
        std::vector<size_t> indices(train.batch_size);
        for (auto& i : indices) i = pick(rng.engine);
        const auto stats = train_step(state, make_batch(dataset, indices), schedule, rng);

        if (state.step % train.log_every == 0) {
            log << state.step << ' ' << stats.loss.simple << ' ' << stats.loss.vlb << ' ' << stats.loss.total << '\n';
        }
        if (options.on_step) options.on_step(state.step, stats);
        if (!options.quiet && state.step % 100 == 0) {
            std::cerr << "step " << state.step << "/" << train.total_steps << " simple=" << stats.loss.simple
                      << " vlb=" << stats.loss.vlb << "\n";
        }
        if (state.step % train.checkpoint_every == 0 && state.step < stop) {
            log.flush();
            save_checkpoint(checkpoint_from_state(state), ckpt_path);
        }
    }
    log.flush();
    save_checkpoint(checkpoint_from_state(state), ckpt_path);
    return state;
}

}  // namespace sdm
