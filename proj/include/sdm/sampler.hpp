#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <functional>
#include <vector>

#include "sdm/layout.hpp"
#include "sdm/losses.hpp"
#include "sdm/network.hpp"
#include "sdm/schedule.hpp"

namespace sdm {

struct GuidanceConfig {
    double scale = 1.5;
    bool enabled = true;

    // True when an unconditional evaluation is needed at all.
    bool active() const { return enabled && scale != 0.0; }
};

struct SamplerConfig {
    int steps = 50;  // respaced step count; values >= T use the full chain
    GuidanceConfig guidance;
    bool clamp_y0 = true;
    uint64_t seed = 0;
    int num_samples = 1;

    void validate() const;
};

// Evaluates the model at effective step t of `schedule` for a batch of noisy
// images and conditions ([B, L, H, W], all-zero rows for the null layout).
using Denoiser = std::function<DenoiserOutput(const torch::Tensor& y_t, const torch::Tensor& condition,
                                              int t, const NoiseSchedule& schedule)>;

using ProgressCallback = std::function<void(int completed, int total)>;

// Wraps a network; effective steps are mapped back to the timesteps it was
// trained on.
Denoiser make_network_denoiser(UNet net);

// Exact noise predictor for data distributed as N(mu0, sigma0^2) per element.
// The returned v makes interpolate_variance produce the exact reverse-step
// variance of the Gaussian chain. Ignores the condition.
Denoiser analytic_gaussian_denoiser(double mu0, double sigma0);

// splitmix64-based derivation of independent stream seeds.
uint64_t derive_seed(uint64_t base, uint64_t index);

// One independent normal stream per batch element, so a sample's noise does
// not depend on what else shares its batch.
class NoiseStreams {
public:
    explicit NoiseStreams(const std::vector<uint64_t>& seeds);
    size_t size() const { return gens_.size(); }
    // [B, shape...] draws, row i from stream i.
    torch::Tensor normal(torch::IntArrayRef per_example_shape, torch::ScalarType dtype);

private:
    std::vector<at::Generator> gens_;
};

std::vector<uint64_t> sample_seeds(uint64_t seed, int count);

torch::Tensor guided_eps(const torch::Tensor& eps_cond, const torch::Tensor& eps_uncond, double scale);

struct StepResult {
    torch::Tensor sample;    // y_{t-1}
    torch::Tensor mean;
    torch::Tensor variance;  // from the conditional v only
};

StepResult p_sample_step(const Denoiser& denoiser, const torch::Tensor& y_t, const torch::Tensor& condition,
                         int t, const NoiseSchedule& schedule, const SamplerConfig& config,
                         NoiseStreams& noise);

// Full ancestral chain for a batch of conditions, one stream per row.
torch::Tensor sample_batch(const Denoiser& denoiser, const torch::Tensor& condition,
                           const NoiseSchedule& schedule, const SamplerConfig& config,
                           const std::vector<uint64_t>& seeds, int image_channels,
                           const ProgressCallback& progress = {});

// config.num_samples images for one layout; a pure function of the inputs.
std::vector<torch::Tensor> sample(const Denoiser& denoiser, const SemanticLayout& layout,
                                  const NoiseSchedule& schedule, const SamplerConfig& config,
                                  int image_channels = 3, const ProgressCallback& progress = {});

// The schedule the sampler actually walks for a given config.
NoiseSchedule effective_schedule(const NoiseSchedule& schedule, const SamplerConfig& config);

struct EditRequest {
    torch::Tensor source_image;  // [C, H, W] in [-1, 1]
    SemanticLayout edited_layout;
    torch::Tensor region_mask;   // [H, W]; 1 = regenerate, 0 = keep
    SamplerConfig sampler;
};

// Samples conditioned on the edited layout, overwriting the kept region after
// every step with the source noised to the current level. The kept region of
// each result equals the source exactly.
std::vector<torch::Tensor> edit_inpaint(const Denoiser& denoiser, const EditRequest& request,
                                        const NoiseSchedule& schedule,
                                        const ProgressCallback& progress = {});

}  // namespace sdm
