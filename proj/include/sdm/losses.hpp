#pragma once

#include <torch/torch.h>

#include <vector>

#include "sdm/schedule.hpp"

namespace sdm {

struct DenoiserOutput {
    torch::Tensor eps;  // noise estimate, same shape as the image batch
    torch::Tensor v;    // variance interpolation coefficient in [0, 1]
};

// Scalar values of one loss evaluation; total = simple + lambda * vlb.
struct LossBreakdown {
    double simple = 0.0;
    double vlb = 0.0;
    double total = 0.0;
    double lambda = 0.0;
};

// Differentiable counterpart of LossBreakdown.
struct LossTerms {
    torch::Tensor simple;
    torch::Tensor vlb;
    torch::Tensor total;
    double lambda = 0.0;

    LossBreakdown breakdown() const;
};

inline constexpr double kDefaultLambdaVlb = 0.001;
inline constexpr double kVarianceFloor = 1e-20;
// Width of one 8-bit quantization bin in [-1, 1].
inline constexpr double kQuantizationBin = 2.0 / 255.0;

torch::Tensor simple_loss(const torch::Tensor& eps_true, const torch::Tensor& eps_pred);

// exp(v log beta_t + (1 - v) log beta~_t); v is clamped to [0, 1] and beta~_t
// is floored before the logarithm.
torch::Tensor interpolate_variance(const torch::Tensor& v, int t, const NoiseSchedule& schedule);
torch::Tensor interpolate_variance(const torch::Tensor& v, const std::vector<int>& ts,
                                   const NoiseSchedule& schedule);
// Log-space form used by the losses to avoid exp/log round trips.
torch::Tensor interpolate_log_variance(const torch::Tensor& v, const std::vector<int>& ts,
                                       const NoiseSchedule& schedule);

// Elementwise KL(N(mean1, var1) || N(mean2, var2)), not reduced.
torch::Tensor gaussian_kl_elementwise(const torch::Tensor& mean1, const torch::Tensor& log_var1,
                                      const torch::Tensor& mean2, const torch::Tensor& log_var2);
// Mean over elements of the KL between diagonal Gaussians.
torch::Tensor gaussian_kl(const torch::Tensor& mean1, const torch::Tensor& var1,
                          const torch::Tensor& mean2, const torch::Tensor& var2);

// Elementwise negative log-likelihood of x under N(mean, exp(log_var))
// integrated over the quantization bin containing x; the outermost bins
// extend to +-infinity.
torch::Tensor discretized_gaussian_nll(const torch::Tensor& x, const torch::Tensor& mean,
                                       const torch::Tensor& log_var);

// Variational term for a batch with per-example timesteps. For t >= 2 it is
// KL(q(y_{t-1} | y_t, y0) || p_model); for t = 1 it is the discretized NLL of y0.
// model_mean is used as given: callers detach it so only the variance head
// receives gradient from this term.
torch::Tensor vlb_term(const torch::Tensor& model_mean, const torch::Tensor& model_var,
                       const torch::Tensor& y_t, const torch::Tensor& y0, const std::vector<int>& ts,
                       const NoiseSchedule& schedule);
torch::Tensor vlb_term(const torch::Tensor& model_mean, const torch::Tensor& model_var,
                       const torch::Tensor& y_t, const torch::Tensor& y0, int t,
                       const NoiseSchedule& schedule);

// Model mean of p(y_{t-1} | y_t) implied by a noise estimate.
torch::Tensor model_mean_from_eps(const torch::Tensor& y_t, const torch::Tensor& eps,
                                  const std::vector<int>& ts, const NoiseSchedule& schedule);

LossTerms total_loss(const torch::Tensor& eps_true, const DenoiserOutput& output,
                     const torch::Tensor& y_t, const torch::Tensor& y0, const std::vector<int>& ts,
                     const NoiseSchedule& schedule, double lambda = kDefaultLambdaVlb);

}  // namespace sdm
