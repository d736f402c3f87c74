#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "sdm/dataset.hpp"
#include "sdm/losses.hpp"
#include "sdm/network.hpp"
#include "sdm/schedule.hpp"

namespace sdm {

enum class DropoutPhase { from_scratch, finetune_only };

std::string to_string(DropoutPhase p);
DropoutPhase dropout_phase_from_string(const std::string& s);

struct TrainConfig {
    int batch_size = 16;
    int64_t total_steps = 10000;
    double learning_rate = 1e-4;
    double weight_decay = 0.0;
    double lambda_vlb = kDefaultLambdaVlb;
    double ema_decay = 0.9999;
    // Use min(ema_decay, (1 + n) / (10 + n)) at update n so short runs do not
    // leave the average dominated by the initialization.
    bool ema_warmup = true;
    double dropout_prob = 0.2;
    DropoutPhase dropout_phase = DropoutPhase::finetune_only;
    // Negative means 70% of total_steps.
    int64_t finetune_start_step = -1;
    double grad_clip = 1.0;
    uint64_t seed = 0;
    int64_t checkpoint_every = 1000;
    int64_t log_every = 1;

    int64_t dropout_start() const;
    void validate() const;

    bool operator==(const TrainConfig&) const = default;
};

// Schedule construction parameters, persisted with the model.
struct DiffusionConfig {
    int num_steps = 1000;
    double beta_start = 1e-4;
    double beta_end = 0.02;

    NoiseSchedule build() const { return build_linear_schedule(num_steps, beta_start, beta_end); }
    static DiffusionConfig scaled_default(int num_steps);

    bool operator==(const DiffusionConfig&) const = default;
};

// Adaptive moment estimation with decoupled weight decay.
class AdamW {
public:
    AdamW(std::vector<torch::Tensor> params, double lr, double weight_decay, double beta1 = 0.9,
          double beta2 = 0.999, double eps = 1e-8);

    void step();
    void zero_grad();

    int64_t step_count() const { return step_count_; }
    void set_step_count(int64_t n) { step_count_ = n; }
    std::vector<torch::Tensor>& first_moments() { return m_; }
    std::vector<torch::Tensor>& second_moments() { return v_; }
    void set_learning_rate(double lr) { lr_ = lr; }

private:
    std::vector<torch::Tensor> params_;
    std::vector<torch::Tensor> m_, v_;
    double lr_, weight_decay_, beta1_, beta2_, eps_;
    int64_t step_count_ = 0;
};

// ema <- decay * ema + (1 - decay) * current, elementwise.
void ema_update(const std::vector<torch::Tensor>& ema, const std::vector<torch::Tensor>& current, double decay);

struct TrainState {
    ModelConfig model_config;
    TrainConfig train_config;
    DiffusionConfig diffusion;
    SceneSpec scene_spec;
    UNet model{nullptr};
    UNet ema{nullptr};
    std::unique_ptr<AdamW> optimizer;
    int64_t step = 0;  // completed optimizer steps

    static TrainState create(const ModelConfig& model, const TrainConfig& train, const DiffusionConfig& diffusion,
                             const SceneSpec& scene);
};

struct Batch {
    torch::Tensor images;      // [B, C, H, W]
    torch::Tensor conditions;  // [B, L, H, W]
};

struct StepStats {
    LossBreakdown loss;
    std::vector<int> timesteps;
    int dropped_layouts = 0;
    double grad_norm = 0.0;
};

// Random generator state for one step, derived from (seed, step) so a resumed
// run draws exactly what the uninterrupted run would.
struct StepRng {
    std::mt19937_64 engine;
    at::Generator noise;

    StepRng(uint64_t seed, int64_t step);
};

Batch make_batch(const Dataset& dataset, const std::vector<size_t>& indices);

// One optimization step: uniform t, noise, optional label dropout, hybrid
// loss, clipped AdamW update, EMA update.
StepStats train_step(TrainState& state, const Batch& batch, const NoiseSchedule& schedule, StepRng& rng);

struct RunOptions {
    std::optional<std::filesystem::path> resume_from;
    // Stop (and checkpoint) after this many completed steps; defaults to total_steps.
    std::optional<int64_t> stop_after;
    std::function<void(int64_t step, const StepStats&)> on_step;
    bool quiet = true;
};

// Trains on `dataset`, writing out_dir/checkpoint.sdm periodically and at the
// end, and appending `step simple vlb total` lines to out_dir/loss.log.
TrainState run_training(const ModelConfig& model, const TrainConfig& train, const DiffusionConfig& diffusion,
                        const Dataset& dataset, const std::filesystem::path& out_dir, const RunOptions& options = {});

}  // namespace sdm
