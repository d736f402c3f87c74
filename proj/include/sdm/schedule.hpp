#pragma once

#include <torch/torch.h>

#include <utility>
#include <vector>

namespace sdm {

// Per-timestep constants of the forward process. Timesteps are 1-based
// externally (t = 1..T); alpha_cum(0) is defined as 1.
//
// A respaced schedule keeps a strided subset of an original schedule; its
// timestep_map records the original timestep each effective step stands
// for, which is what a trained network must be conditioned on.
class NoiseSchedule {
public:
    NoiseSchedule() = default;
    // betas[i] is beta_{i+1}. timestep_map defaults to the identity.
    explicit NoiseSchedule(std::vector<double> betas, std::vector<int> timestep_map = {});

    int num_steps() const { return static_cast<int>(betas_.size()); }

    double beta(int t) const;
    double alpha_cum(int t) const;  // accepts t = 0
    double posterior_variance(int t) const;
    double posterior_coef_y0(int t) const;
    double posterior_coef_yt(int t) const;
    // Original timestep for effective step t.
    int model_timestep(int t) const;

    const std::vector<double>& betas() const { return betas_; }
    const std::vector<double>& alphas_cumulative() const { return alpha_cum_; }
    const std::vector<double>& posterior_variances() const { return posterior_var_; }
    const std::vector<int>& timestep_map() const { return timestep_map_; }

    // Parameters the schedule was built from, for persistence.
    double beta_start() const { return beta_start_; }
    double beta_end() const { return beta_end_; }

    void check_timestep(int t) const;

    friend NoiseSchedule build_linear_schedule(int, double, double);

private:
    std::vector<double> betas_;
    std::vector<double> alpha_cum_;
    std::vector<double> posterior_var_;
    std::vector<double> coef_y0_;
    std::vector<double> coef_yt_;
    std::vector<int> timestep_map_;
    double beta_start_ = 0.0;
    double beta_end_ = 0.0;
};

NoiseSchedule build_linear_schedule(int num_steps, double beta_start, double beta_end);

// Linear schedule whose endpoints (1e-4, 0.02 at T = 1000) are scaled by
// 1000 / T so that short desk-scale chains inject comparable total noise.
NoiseSchedule default_linear_schedule(int num_steps);

// Keeps `steps` evenly strided timesteps and recomputes effective betas so
// the kept alpha_cum values are unchanged.
NoiseSchedule respace_schedule(const NoiseSchedule& schedule, int steps);

// Gathers values[t_b - 1] for each example into a [B, 1, 1, ...] tensor
// broadcastable against `like`.
torch::Tensor gather_per_example(const std::vector<double>& values, const std::vector<int>& ts,
                                 const torch::Tensor& like);

torch::Tensor q_sample(const torch::Tensor& y0, int t, const torch::Tensor& eps,
                       const NoiseSchedule& schedule);
torch::Tensor q_sample(const torch::Tensor& y0, const std::vector<int>& ts, const torch::Tensor& eps,
                       const NoiseSchedule& schedule);

struct Posterior {
    torch::Tensor mean;
    double variance = 0.0;
};

Posterior posterior_params(const torch::Tensor& y_t, const torch::Tensor& y0, int t,
                           const NoiseSchedule& schedule);
// Batched mean with a per-example timestep; the variance is available from
// the schedule.
torch::Tensor posterior_mean(const torch::Tensor& y_t, const torch::Tensor& y0,
                             const std::vector<int>& ts, const NoiseSchedule& schedule);

torch::Tensor predict_y0_from_eps(const torch::Tensor& y_t, const torch::Tensor& eps, int t,
                                  const NoiseSchedule& schedule);
torch::Tensor predict_y0_from_eps(const torch::Tensor& y_t, const torch::Tensor& eps,
                                  const std::vector<int>& ts, const NoiseSchedule& schedule);

}  // namespace sdm
