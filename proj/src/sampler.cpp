#include "sdm/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include <ATen/CPUGeneratorImpl.h>

namespace sdm {

void SamplerConfig::validate() const {
    if (steps < 1) throw std::invalid_argument("sampler: steps must be >= 1");
    if (num_samples < 1) throw std::invalid_argument("sampler: num_samples must be >= 1");
    if (guidance.scale < 0.0) throw std::invalid_argument("sampler: guidance scale must be >= 0");
}

uint64_t derive_seed(uint64_t base, uint64_t index) {
    uint64_t z = base + 0x9E3779B97F4A7C15ULL * (index + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

std::vector<uint64_t> sample_seeds(uint64_t seed, int count) {
    std::vector<uint64_t> out(count);
    for (int i = 0; i < count; ++i) out[i] = derive_seed(seed, static_cast<uint64_t>(i));
    return out;
}

NoiseStreams::NoiseStreams(const std::vector<uint64_t>& seeds) {
    gens_.reserve(seeds.size());
    for (auto s : seeds) gens_.push_back(at::make_generator<at::CPUGeneratorImpl>(s));
}

torch::Tensor NoiseStreams::normal(torch::IntArrayRef per_example_shape, torch::ScalarType dtype) {
    std::vector<torch::Tensor> rows;
    rows.reserve(gens_.size());
    for (auto& g : gens_) {
        rows.push_back(at::normal(0.0, 1.0, per_example_shape, g, torch::TensorOptions().dtype(dtype)));
    }
    return torch::stack(rows, 0);
}

Denoiser make_network_denoiser(UNet net) {
    return [net](const torch::Tensor& y_t, const torch::Tensor& condition, int t,
                 const NoiseSchedule& schedule) mutable {
        torch::NoGradGuard guard;
        const int model_t = schedule.model_timestep(t);
        return net->forward(y_t, condition, std::vector<int>(y_t.size(0), model_t));
    };
}

Denoiser analytic_gaussian_denoiser(double mu0, double sigma0) {
    if (!(sigma0 > 0.0)) {
        throw std::invalid_argument("analytic_gaussian_denoiser: sigma0 must be positive");
    }
    const double data_var = sigma0 * sigma0;
    return [mu0, data_var](const torch::Tensor& y_t, const torch::Tensor&, int t,
                           const NoiseSchedule& schedule) {
        const double a = schedule.alpha_cum(t);
        const double a_prev = schedule.alpha_cum(t - 1);
        const double marg_var = a * data_var + 1.0 - a;
        const double marg_var_prev = a_prev * data_var + 1.0 - a_prev;

        DenoiserOutput out;
        out.eps = std::sqrt(1.0 - a) * (y_t - std::sqrt(a) * mu0) / marg_var;

        // Var(y_{t-1} | y_t) for Gaussian data, expressed as a coefficient
        // between log beta~_t and log beta_t.
        const double exact_var = marg_var_prev * schedule.beta(t) / marg_var;
        const double log_upper = std::log(schedule.beta(t));
        const double log_lower = std::log(std::max(schedule.posterior_variance(t), kVarianceFloor));
        double v = (std::log(exact_var) - log_lower) / (log_upper - log_lower);
        v = std::clamp(v, 0.0, 1.0);
        out.v = torch::full_like(y_t, v);
        return out;
    };
}

torch::Tensor guided_eps(const torch::Tensor& eps_cond, const torch::Tensor& eps_uncond, double scale) {
    if (eps_cond.sizes() != eps_uncond.sizes()) {
        throw std::invalid_argument("guided_eps: shape mismatch");
    }
    if (scale == 0.0) return eps_cond;
    return eps_cond + scale * (eps_cond - eps_uncond);
}

namespace {

void require_finite(const DenoiserOutput& out, const torch::Tensor& y_t, int t) {
    if (out.eps.sizes() != y_t.sizes() || out.v.sizes() != y_t.sizes()) {
        std::ostringstream msg;
        msg << "denoiser output shape " << out.eps.sizes() << " does not match input " << y_t.sizes();
        throw std::runtime_error(msg.str());
    }
    if (!torch::isfinite(out.eps).all().item<bool>() || !torch::isfinite(out.v).all().item<bool>()) {
        throw std::runtime_error("denoiser produced non-finite values at step t=" + std::to_string(t));
    }
}

}  // namespace

StepResult p_sample_step(const Denoiser& denoiser, const torch::Tensor& y_t, const torch::Tensor& condition,
                         int t, const NoiseSchedule& schedule, const SamplerConfig& config,
                         NoiseStreams& noise) {
    schedule.check_timestep(t);
    const auto cond_out = denoiser(y_t, condition, t, schedule);
    require_finite(cond_out, y_t, t);

    auto eps = cond_out.eps;
    if (config.guidance.active()) {
        const auto uncond_out = denoiser(y_t, torch::zeros_like(condition), t, schedule);
        require_finite(uncond_out, y_t, t);
        eps = guided_eps(cond_out.eps, uncond_out.eps, config.guidance.scale);
    }

    auto y0_hat = predict_y0_from_eps(y_t, eps, t, schedule);
    if (config.clamp_y0) y0_hat = y0_hat.clamp(-1.0, 1.0);

    StepResult result;
    result.mean = posterior_params(y_t, y0_hat, t, schedule).mean;
    result.variance = interpolate_variance(cond_out.v, t, schedule);
    if (t > 1) {
        const auto z = noise.normal(y_t.sizes().slice(1), y_t.scalar_type());
        result.sample = result.mean + torch::sqrt(result.variance) * z;
    } else {
        result.sample = result.mean;
    }
    return result;
}

NoiseSchedule effective_schedule(const NoiseSchedule& schedule, const SamplerConfig& config) {
    if (config.steps >= schedule.num_steps()) return schedule;
    return respace_schedule(schedule, config.steps);
}

torch::Tensor sample_batch(const Denoiser& denoiser, const torch::Tensor& condition,
                           const NoiseSchedule& schedule, const SamplerConfig& config,
                           const std::vector<uint64_t>& seeds, int image_channels,
                           const ProgressCallback& progress) {
    config.validate();
    if (condition.dim() != 4 || condition.size(0) != static_cast<int64_t>(seeds.size())) {
        throw std::invalid_argument("sample_batch: need one seed per condition row");
    }
    const auto eff = effective_schedule(schedule, config);
    NoiseStreams noise(seeds);
    auto y = noise.normal({image_channels, condition.size(2), condition.size(3)}, condition.scalar_type());
    const int total = eff.num_steps();
    for (int t = total; t >= 1; --t) {
        y = p_sample_step(denoiser, y, condition, t, eff, config, noise).sample;
        if (progress) progress(total - t + 1, total);
    }
    return y;
}

std::vector<torch::Tensor> sample(const Denoiser& denoiser, const SemanticLayout& layout,
                                  const NoiseSchedule& schedule, const SamplerConfig& config,
                                  int image_channels, const ProgressCallback& progress) {
    config.validate();
    const auto cond = layout.condition().unsqueeze(0).expand({config.num_samples, -1, -1, -1}).contiguous();
    const auto batch = sample_batch(denoiser, cond, schedule, config,
                                    sample_seeds(config.seed, config.num_samples), image_channels, progress);
    std::vector<torch::Tensor> out;
    for (int i = 0; i < config.num_samples; ++i) out.push_back(batch[i]);
    return out;
}

std::vector<torch::Tensor> edit_inpaint(const Denoiser& denoiser, const EditRequest& request,
                                        const NoiseSchedule& schedule, const ProgressCallback& progress) {
    const auto& config = request.sampler;
    config.validate();
    const auto& src = request.source_image;
    if (src.dim() != 3) throw std::invalid_argument("edit_inpaint: source image must be [C, H, W]");
    const auto h = src.size(1), w = src.size(2);
    if (request.region_mask.dim() != 2 || request.region_mask.size(0) != h || request.region_mask.size(1) != w) {
        throw std::invalid_argument("edit_inpaint: region mask must be [" + std::to_string(h) + ", " +
                                    std::to_string(w) + "]");
    }
    if (request.edited_layout.height() != h || request.edited_layout.width() != w) {
        throw std::invalid_argument("edit_inpaint: layout size differs from the source image");
    }

    const int n = config.num_samples;
    const auto eff = effective_schedule(schedule, config);
    const auto cond = request.edited_layout.condition().unsqueeze(0).expand({n, -1, -1, -1}).contiguous();
    const auto source = src.to(torch::kFloat32).unsqueeze(0).expand({n, -1, -1, -1}).contiguous();
    const auto keep = (request.region_mask < 0.5).view({1, 1, h, w});
    const auto shape = std::vector<int64_t>{src.size(0), h, w};

    NoiseStreams noise(sample_seeds(config.seed, n));
    auto y = noise.normal(shape, torch::kFloat32);
    const int total = eff.num_steps();
    y = torch::where(keep, q_sample(source, total, noise.normal(shape, torch::kFloat32), eff), y);
    for (int t = total; t >= 1; --t) {
        y = p_sample_step(denoiser, y, cond, t, eff, config, noise).sample;
        const auto known = t - 1 == 0 ? source : q_sample(source, t - 1, noise.normal(shape, torch::kFloat32), eff);
        y = torch::where(keep, known, y);
        if (progress) progress(total - t + 1, total);
    }
    std::vector<torch::Tensor> out;
    for (int i = 0; i < n; ++i) out.push_back(y[i]);
    return out;
}

}  // namespace sdm
