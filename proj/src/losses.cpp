#include "sdm/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace sdm {

LossBreakdown LossTerms::breakdown() const {
    LossBreakdown b;
    b.simple = simple.item<double>();
    b.vlb = vlb.item<double>();
    b.total = total.item<double>();
    b.lambda = lambda;
    return b;
}

namespace {

void require_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
    if (a.sizes() != b.sizes()) {
        throw std::invalid_argument(std::string(what) + ": shape mismatch");
    }
}

std::vector<double> log_bounds(const NoiseSchedule& schedule, bool upper) {
    std::vector<double> out(schedule.num_steps());
    for (int t = 1; t <= schedule.num_steps(); ++t) {
        const double value = upper ? schedule.beta(t) : schedule.posterior_variance(t);
        out[t - 1] = std::log(std::max(value, kVarianceFloor));
    }
    return out;
}

torch::Tensor standard_normal_cdf(const torch::Tensor& x) {
    return 0.5 * (1.0 + torch::erf(x / std::sqrt(2.0)));
}

}  // namespace

torch::Tensor simple_loss(const torch::Tensor& eps_true, const torch::Tensor& eps_pred) {
    require_same_shape(eps_true, eps_pred, "simple_loss");
    return (eps_true - eps_pred).pow(2).mean();
}

torch::Tensor interpolate_log_variance(const torch::Tensor& v, const std::vector<int>& ts,
                                       const NoiseSchedule& schedule) {
    const auto frac = v.clamp(0.0, 1.0);
    const auto log_upper = gather_per_example(log_bounds(schedule, true), ts, v);
    const auto log_lower = gather_per_example(log_bounds(schedule, false), ts, v);
    return frac * log_upper + (1.0 - frac) * log_lower;
}

torch::Tensor interpolate_variance(const torch::Tensor& v, const std::vector<int>& ts,
                                   const NoiseSchedule& schedule) {
    return torch::exp(interpolate_log_variance(v, ts, schedule));
}

torch::Tensor interpolate_variance(const torch::Tensor& v, int t, const NoiseSchedule& schedule) {
    const double log_upper = std::log(schedule.beta(t));
    const double log_lower = std::log(std::max(schedule.posterior_variance(t), kVarianceFloor));
    const auto frac = v.clamp(0.0, 1.0);
    return torch::exp(frac * log_upper + (1.0 - frac) * log_lower);
}

torch::Tensor gaussian_kl_elementwise(const torch::Tensor& mean1, const torch::Tensor& log_var1,
                                      const torch::Tensor& mean2, const torch::Tensor& log_var2) {
    return 0.5 * (log_var2 - log_var1 + torch::exp(log_var1 - log_var2) +
                  (mean1 - mean2).pow(2) * torch::exp(-log_var2) - 1.0);
}

torch::Tensor gaussian_kl(const torch::Tensor& mean1, const torch::Tensor& var1,
                          const torch::Tensor& mean2, const torch::Tensor& var2) {
    require_same_shape(mean1, mean2, "gaussian_kl");
    if ((var1 <= 0).any().item<bool>() || (var2 <= 0).any().item<bool>()) {
        throw std::invalid_argument("gaussian_kl: variances must be strictly positive");
    }
    return gaussian_kl_elementwise(mean1, torch::log(var1), mean2, torch::log(var2)).mean();
}

torch::Tensor discretized_gaussian_nll(const torch::Tensor& x, const torch::Tensor& mean,
                                       const torch::Tensor& log_var) {
    require_same_shape(x, mean, "discretized_gaussian_nll");
    const double half_bin = kQuantizationBin / 2.0;
    const auto centered = x - mean;
    const auto inv_std = torch::exp(-0.5 * log_var);
    const auto cdf_plus = standard_normal_cdf(inv_std * (centered + half_bin));
    const auto cdf_min = standard_normal_cdf(inv_std * (centered - half_bin));
    const auto log_cdf_plus = torch::log(cdf_plus.clamp_min(1e-12));
    const auto log_one_minus_cdf_min = torch::log((1.0 - cdf_min).clamp_min(1e-12));
    const auto log_delta = torch::log((cdf_plus - cdf_min).clamp_min(1e-12));
    const auto log_probs = torch::where(
        x < -0.999, log_cdf_plus, torch::where(x > 0.999, log_one_minus_cdf_min, log_delta));
    return -log_probs;
}

torch::Tensor vlb_term(const torch::Tensor& model_mean, const torch::Tensor& model_var,
                       const torch::Tensor& y_t, const torch::Tensor& y0, const std::vector<int>& ts,
                       const NoiseSchedule& schedule) {
    require_same_shape(model_mean, y0, "vlb_term");
    require_same_shape(model_var, y0, "vlb_term");
    if ((model_var <= 0).any().item<bool>()) {
        throw std::invalid_argument("vlb_term: model variance must be strictly positive");
    }
    const auto true_mean = posterior_mean(y_t, y0, ts, schedule);
    std::vector<double> post_log_var(schedule.num_steps());
    for (int t = 1; t <= schedule.num_steps(); ++t) {
        post_log_var[t - 1] = std::log(std::max(schedule.posterior_variance(t), kVarianceFloor));
    }
    const auto true_log_var = gather_per_example(post_log_var, ts, y0);
    const auto model_log_var = torch::log(model_var);

    const auto kl = gaussian_kl_elementwise(true_mean, true_log_var, model_mean, model_log_var);
    const auto nll = discretized_gaussian_nll(y0, model_mean, model_log_var);

    std::vector<int64_t> shape(y0.dim(), 1);
    shape[0] = y0.size(0);
    std::vector<uint8_t> first(ts.size());
    for (size_t i = 0; i < ts.size(); ++i) first[i] = ts[i] == 1;
    const auto is_first = torch::tensor(first, torch::kBool).view(shape);
    return torch::where(is_first, nll, kl).mean();
}

torch::Tensor vlb_term(const torch::Tensor& model_mean, const torch::Tensor& model_var,
                       const torch::Tensor& y_t, const torch::Tensor& y0, int t,
                       const NoiseSchedule& schedule) {
    const std::vector<int> ts(y0.size(0), t);
    return vlb_term(model_mean, model_var, y_t, y0, ts, schedule);
}

torch::Tensor model_mean_from_eps(const torch::Tensor& y_t, const torch::Tensor& eps,
                                  const std::vector<int>& ts, const NoiseSchedule& schedule) {
    const auto y0_hat = predict_y0_from_eps(y_t, eps, ts, schedule);
    return posterior_mean(y_t, y0_hat, ts, schedule);
}

LossTerms total_loss(const torch::Tensor& eps_true, const DenoiserOutput& output,
                     const torch::Tensor& y_t, const torch::Tensor& y0, const std::vector<int>& ts,
                     const NoiseSchedule& schedule, double lambda) {
    LossTerms terms;
    terms.lambda = lambda;
    terms.simple = simple_loss(eps_true, output.eps);
    const auto mean = model_mean_from_eps(y_t, output.eps.detach(), ts, schedule);
    const auto var = interpolate_variance(output.v, ts, schedule);
    terms.vlb = vlb_term(mean, var, y_t, y0, ts, schedule);
    terms.total = terms.simple + lambda * terms.vlb;
    return terms;
}

}  // namespace sdm
