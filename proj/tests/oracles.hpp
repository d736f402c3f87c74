#pragma once

// Reference computations written directly from the definitions, without
// calling into the library, for use as test oracles.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace oracle {

inline std::vector<double> linear_betas(int T, double b0, double b1) {
    std::vector<double> b(T);
    for (int t = 1; t <= T; ++t) b[t - 1] = T == 1 ? b0 : b0 + (t - 1) * (b1 - b0) / (T - 1);
    return b;
}

// alpha_cum[t] for t = 0..T with alpha_cum[0] = 1.
inline std::vector<double> alpha_cum(const std::vector<double>& betas) {
    std::vector<double> a(betas.size() + 1, 1.0);
    for (size_t i = 0; i < betas.size(); ++i) a[i + 1] = a[i] * (1.0 - betas[i]);
    return a;
}

inline double posterior_variance(const std::vector<double>& betas, int t) {
    const auto a = alpha_cum(betas);
    return (1.0 - a[t - 1]) / (1.0 - a[t]) * betas[t - 1];
}

struct Moments {
    double mean;
    double var;
};

// Moments of p(y_{t-1} | y_t, y0) ∝ q(y_{t-1} | y0) q(y_t | y_{t-1}),
// integrated numerically on a dense grid.
inline Moments grid_bayes_posterior(double y0, double yt, int t, const std::vector<double>& betas) {
    const auto a = alpha_cum(betas);
    const double prior_mean = std::sqrt(a[t - 1]) * y0;
    const double prior_var = 1.0 - a[t - 1];
    const double beta = betas[t - 1];
    const double scale = std::sqrt(1.0 - beta);
    auto log_density = [&](double x) {
        const double d1 = x - prior_mean;
        const double d2 = yt - scale * x;
        return -0.5 * d1 * d1 / prior_var - 0.5 * d2 * d2 / beta;
    };
    // Bracket the mode with a coarse scan, then integrate around it.
    const double width = std::sqrt(std::min(prior_var, beta / (1.0 - beta)));
    const double center = (prior_mean / prior_var + scale * yt / beta) / (1.0 / prior_var + scale * scale / beta);
    const int n = 400001;
    const double lo = center - 20.0 * width, hi = center + 20.0 * width;
    const double h = (hi - lo) / (n - 1);
    const double ref = log_density(center);
    double z = 0, m1 = 0;
    std::vector<double> w(n);
    for (int i = 0; i < n; ++i) {
        const double x = lo + i * h;
        w[i] = std::exp(log_density(x) - ref);
        z += w[i];
        m1 += w[i] * x;
    }
    const double mean = m1 / z;
    double m2 = 0;
    for (int i = 0; i < n; ++i) {
        const double d = lo + i * h - mean;
        m2 += w[i] * d * d;
    }
    return {mean, m2 / z};
}

// Monte-Carlo estimate of mean_i KL(N(m1_i, v1_i) || N(m2_i, v2_i)).
inline double monte_carlo_kl(const std::vector<double>& m1, const std::vector<double>& v1,
                             const std::vector<double>& m2, const std::vector<double>& v2, int draws,
                             uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    double total = 0;
    for (size_t i = 0; i < m1.size(); ++i) {
        double acc = 0;
        for (int k = 0; k < draws; ++k) {
            const double x = m1[i] + std::sqrt(v1[i]) * normal(rng);
            const double lp = -0.5 * std::log(v1[i]) - 0.5 * (x - m1[i]) * (x - m1[i]) / v1[i];
            const double lq = -0.5 * std::log(v2[i]) - 0.5 * (x - m2[i]) * (x - m2[i]) / v2[i];
            acc += lp - lq;
        }
        total += acc / draws;
    }
    return total / m1.size();
}

// 1 where any in-bounds 4-neighbour differs.
inline std::vector<std::vector<int>> brute_edges(const std::vector<std::vector<int>>& ids) {
    const int h = static_cast<int>(ids.size()), w = static_cast<int>(ids[0].size());
    std::vector<std::vector<int>> out(h, std::vector<int>(w, 0));
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const int dy[] = {-1, 1, 0, 0}, dx[] = {0, 0, -1, 1};
            for (int k = 0; k < 4; ++k) {
                const int ny = y + dy[k], nx = x + dx[k];
                if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
                if (ids[ny][nx] != ids[y][x]) out[y][x] = 1;
            }
        }
    }
    return out;
}

}  // namespace oracle
