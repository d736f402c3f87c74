#include "sdm/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace sdm {

NoiseSchedule::NoiseSchedule(std::vector<double> betas, std::vector<int> timestep_map)
    : betas_(std::move(betas)), timestep_map_(std::move(timestep_map)) {
    if (betas_.empty()) {
        throw std::invalid_argument("NoiseSchedule: at least one timestep is required");
    }
    const auto n = betas_.size();
    if (timestep_map_.empty()) {
        timestep_map_.resize(n);
        for (size_t i = 0; i < n; ++i) timestep_map_[i] = static_cast<int>(i) + 1;
    } else if (timestep_map_.size() != n) {
        throw std::invalid_argument("NoiseSchedule: timestep map length differs from beta count");
    }

    alpha_cum_.resize(n);
    posterior_var_.resize(n);
    coef_y0_.resize(n);
    coef_yt_.resize(n);
    double prev = 1.0;
    for (size_t i = 0; i < n; ++i) {
        const double beta = betas_[i];
        if (!(beta > 0.0 && beta < 1.0)) {
            throw std::invalid_argument("NoiseSchedule: beta_" + std::to_string(i + 1) +
                                        " = " + std::to_string(beta) + " outside (0, 1)");
        }
        const double cur = prev * (1.0 - beta);
        alpha_cum_[i] = cur;
        posterior_var_[i] = (1.0 - prev) / (1.0 - cur) * beta;
        coef_y0_[i] = std::sqrt(prev) * beta / (1.0 - cur);
        coef_yt_[i] = std::sqrt(1.0 - beta) * (1.0 - prev) / (1.0 - cur);
        prev = cur;
    }
    beta_start_ = betas_.front();
    beta_end_ = betas_.back();
}

void NoiseSchedule::check_timestep(int t) const {
    if (t < 1 || t > num_steps()) {
        throw std::out_of_range("timestep " + std::to_string(t) + " outside 1.." +
                                std::to_string(num_steps()));
    }
}

double NoiseSchedule::beta(int t) const {
    check_timestep(t);
    return betas_[t - 1];
}

double NoiseSchedule::alpha_cum(int t) const {
    if (t == 0) return 1.0;
    check_timestep(t);
    return alpha_cum_[t - 1];
}

double NoiseSchedule::posterior_variance(int t) const {
    check_timestep(t);
    return posterior_var_[t - 1];
}

double NoiseSchedule::posterior_coef_y0(int t) const {
    check_timestep(t);
    return coef_y0_[t - 1];
}

double NoiseSchedule::posterior_coef_yt(int t) const {
    check_timestep(t);
    return coef_yt_[t - 1];
}

int NoiseSchedule::model_timestep(int t) const {
    check_timestep(t);
    return timestep_map_[t - 1];
}

NoiseSchedule build_linear_schedule(int num_steps, double beta_start, double beta_end) {
    if (num_steps < 1) {
        throw std::invalid_argument("build_linear_schedule: T must be positive, got " +
                                    std::to_string(num_steps));
    }
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
        throw std::invalid_argument("build_linear_schedule: need 0 < beta_start <= beta_end < 1");
    }
    std::vector<double> betas(num_steps);
    for (int i = 0; i < num_steps; ++i) {
        const double frac = num_steps > 1 ? static_cast<double>(i) / (num_steps - 1) : 0.0;
        betas[i] = beta_start + frac * (beta_end - beta_start);
    }
    NoiseSchedule schedule(std::move(betas));
    schedule.beta_start_ = beta_start;
    schedule.beta_end_ = beta_end;
    return schedule;
}

NoiseSchedule default_linear_schedule(int num_steps) {
    if (num_steps < 1) {
        throw std::invalid_argument("default_linear_schedule: T must be positive");
    }
    const double scale = 1000.0 / num_steps;
    const double end = std::min(0.02 * scale, 0.999);
    const double start = std::min(1e-4 * scale, end);
    return build_linear_schedule(num_steps, start, end);
}

NoiseSchedule respace_schedule(const NoiseSchedule& schedule, int steps) {
    const int total = schedule.num_steps();
    if (steps < 1 || steps > total) {
        throw std::out_of_range("respace_schedule: steps " + std::to_string(steps) +
                                " outside 1.." + std::to_string(total));
    }
    std::vector<int> kept(steps);
    for (int i = 0; i < steps; ++i) {
        if (steps == 1) {
            kept[i] = total;
        } else {
            kept[i] = 1 + static_cast<int>(std::llround(static_cast<double>(i) * (total - 1) / (steps - 1)));
        }
    }
    std::vector<double> betas(steps);
    std::vector<int> map(steps);
    double prev = 1.0;
    for (int i = 0; i < steps; ++i) {
        const double cur = schedule.alpha_cum(kept[i]);
        betas[i] = 1.0 - cur / prev;
        map[i] = schedule.model_timestep(kept[i]);
        prev = cur;
    }
    NoiseSchedule out(std::move(betas), std::move(map));
    return out;
}

torch::Tensor gather_per_example(const std::vector<double>& values, const std::vector<int>& ts,
                                 const torch::Tensor& like) {
    if (like.dim() < 1 || like.size(0) != static_cast<int64_t>(ts.size())) {
        throw std::invalid_argument("gather_per_example: batch size " +
                                    std::to_string(like.dim() ? like.size(0) : 0) +
                                    " does not match " + std::to_string(ts.size()) + " timesteps");
    }
    std::vector<double> picked(ts.size());
    for (size_t i = 0; i < ts.size(); ++i) {
        if (ts[i] < 1 || ts[i] > static_cast<int>(values.size())) {
            throw std::out_of_range("timestep " + std::to_string(ts[i]) + " outside 1.." +
                                    std::to_string(values.size()));
        }
        picked[i] = values[ts[i] - 1];
    }
    std::vector<int64_t> shape(like.dim(), 1);
    shape[0] = static_cast<int64_t>(ts.size());
    return torch::tensor(picked, torch::kFloat64).to(like.scalar_type()).view(shape);
}

namespace {

void check_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
    if (a.sizes() != b.sizes()) {
        throw std::invalid_argument(std::string(what) + ": shape mismatch");
    }
}

std::vector<double> sqrt_of(const std::vector<double>& v, bool complement) {
    std::vector<double> out(v.size());
    for (size_t i = 0; i < v.size(); ++i) out[i] = std::sqrt(complement ? 1.0 - v[i] : v[i]);
    return out;
}

}  // namespace

torch::Tensor q_sample(const torch::Tensor& y0, int t, const torch::Tensor& eps,
                       const NoiseSchedule& schedule) {
    check_same_shape(y0, eps, "q_sample");
    // t = 0 is the clean image; editing uses it for the final replacement.
    if (t == 0) return y0.clone();
    const double a = schedule.alpha_cum(t);
    return std::sqrt(a) * y0 + std::sqrt(1.0 - a) * eps;
}

torch::Tensor q_sample(const torch::Tensor& y0, const std::vector<int>& ts, const torch::Tensor& eps,
                       const NoiseSchedule& schedule) {
    check_same_shape(y0, eps, "q_sample");
    const auto& ac = schedule.alphas_cumulative();
    return gather_per_example(sqrt_of(ac, false), ts, y0) * y0 +
           gather_per_example(sqrt_of(ac, true), ts, y0) * eps;
}

Posterior posterior_params(const torch::Tensor& y_t, const torch::Tensor& y0, int t,
                           const NoiseSchedule& schedule) {
    check_same_shape(y_t, y0, "posterior_params");
    Posterior p;
    p.mean = schedule.posterior_coef_y0(t) * y0 + schedule.posterior_coef_yt(t) * y_t;
    p.variance = schedule.posterior_variance(t);
    return p;
}

torch::Tensor posterior_mean(const torch::Tensor& y_t, const torch::Tensor& y0,
                             const std::vector<int>& ts, const NoiseSchedule& schedule) {
    check_same_shape(y_t, y0, "posterior_mean");
    std::vector<double> c0(schedule.num_steps()), ct(schedule.num_steps());
    for (int t = 1; t <= schedule.num_steps(); ++t) {
        c0[t - 1] = schedule.posterior_coef_y0(t);
        ct[t - 1] = schedule.posterior_coef_yt(t);
    }
    return gather_per_example(c0, ts, y0) * y0 + gather_per_example(ct, ts, y0) * y_t;
}

torch::Tensor predict_y0_from_eps(const torch::Tensor& y_t, const torch::Tensor& eps, int t,
                                  const NoiseSchedule& schedule) {
    check_same_shape(y_t, eps, "predict_y0_from_eps");
    const double a = schedule.alpha_cum(t);
    return (y_t - std::sqrt(1.0 - a) * eps) / std::sqrt(a);
}

torch::Tensor predict_y0_from_eps(const torch::Tensor& y_t, const torch::Tensor& eps,
                                  const std::vector<int>& ts, const NoiseSchedule& schedule) {
    check_same_shape(y_t, eps, "predict_y0_from_eps");
    const auto& ac = schedule.alphas_cumulative();
    return (y_t - gather_per_example(sqrt_of(ac, true), ts, y_t) * eps) /
           gather_per_example(sqrt_of(ac, false), ts, y_t);
}

}  // namespace sdm
