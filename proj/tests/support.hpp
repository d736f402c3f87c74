#pragma once

#include <torch/torch.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "sdm/dataset.hpp"
#include "sdm/losses.hpp"
#include "sdm/network.hpp"
#include "sdm/schedule.hpp"

namespace testing {

// Two-level network with 8 base channels.
inline sdm::ModelConfig mini_config(int image_size = 8, int num_classes = 3) {
    sdm::ModelConfig c;
    c.image_size = image_size;
    c.num_classes = num_classes;
    c.base_channels = 8;
    c.channel_multipliers = {1, 2};
    c.attention_resolutions = {image_size / 2};
    c.head_channels = 8;
    c.spade_hidden_channels = 8;
    return c;
}

inline torch::Tensor random_condition(const sdm::ModelConfig& c, int64_t batch, uint64_t seed) {
    std::vector<torch::Tensor> conds;
    for (int64_t b = 0; b < batch; ++b) {
        sdm::SceneSpec spec;
        spec.image_size = c.image_size;
        spec.num_classes = c.num_classes;
        spec.use_edge_map = c.use_edge_map;
        conds.push_back(sdm::generate_scene(spec, seed + b).layout.condition());
    }
    return torch::stack(conds, 0);
}

struct GradientProbe {
    double analytic;
    double numeric;
    double relative_error;
};

// Directional derivatives of total_loss through a network along random
// parameter directions, against central differences of the same objective
// with the variational term's mean held at its value at the base point.
inline std::vector<GradientProbe> gradient_probes(int count, double lambda, uint64_t seed) {
    const auto cfg = mini_config();
    sdm::UNet net(cfg);
    sdm::randomize_parameters(*net, 0.15, seed);
    net->to(torch::kFloat64);

    const auto schedule = sdm::build_linear_schedule(50, 1e-3, 0.05);
    at::Generator gen = at::detail::createCPUGenerator(seed + 1);
    const auto y0 = at::rand({2, 3, cfg.image_size, cfg.image_size}, gen, torch::kFloat64) * 2 - 1;
    const auto noise = at::normal(0.0, 1.0, y0.sizes(), gen, torch::kFloat64);
    const std::vector<int> ts{1, 37};
    const auto yt = sdm::q_sample(y0, ts, noise, schedule);
    const auto cond = random_condition(cfg, 2, seed + 2).to(torch::kFloat64);

    auto params = net->parameters();
    const auto out = net->forward(yt, cond, ts);
    const auto terms = sdm::total_loss(noise, out, yt, y0, ts, schedule, lambda);
    const auto grads = torch::autograd::grad({terms.total}, params, {}, false, false, true);
    const auto fixed_mean = sdm::model_mean_from_eps(yt, out.eps, ts, schedule).detach();

    auto objective = [&] {
        torch::NoGradGuard guard;
        const auto o = net->forward(yt, cond, ts);
        const auto simple = sdm::simple_loss(noise, o.eps);
        const auto vlb = sdm::vlb_term(fixed_mean, sdm::interpolate_variance(o.v, ts, schedule), yt, y0, ts, schedule);
        return (simple + lambda * vlb).item<double>();
    };

    std::vector<GradientProbe> probes;
    for (int k = 0; k < count; ++k) {
        std::vector<torch::Tensor> dir;
        double norm2 = 0;
        for (auto& p : params) {
            dir.push_back(at::normal(0.0, 1.0, p.sizes(), gen, torch::kFloat64));
            norm2 += dir.back().pow(2).sum().item<double>();
        }
        double analytic = 0;
        for (size_t i = 0; i < params.size(); ++i) {
            dir[i] /= std::sqrt(norm2);
            if (grads[i].defined()) analytic += (grads[i] * dir[i]).sum().item<double>();
        }
        const double h = 1e-5;
        auto shift = [&](double amount) {
            torch::NoGradGuard guard;
            for (size_t i = 0; i < params.size(); ++i) params[i].add_(dir[i], amount);
        };
        shift(h);
        const double up = objective();
        shift(-2 * h);
        const double down = objective();
        shift(h);
        const double numeric = (up - down) / (2 * h);
        const double scale = std::max({std::fabs(analytic), std::fabs(numeric), 1e-12});
        probes.push_back({analytic, numeric, std::fabs(analytic - numeric) / scale});
    }
    return probes;
}

inline std::filesystem::path temp_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("sdm_test_" + name + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace testing
