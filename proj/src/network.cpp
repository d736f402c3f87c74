#include "sdm/network.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

#include <ATen/CPUGeneratorImpl.h>

namespace sdm {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

std::string to_string(Conditioning c) {
    return c == Conditioning::spade ? "spade" : "concat";
}

Conditioning conditioning_from_string(const std::string& s) {
    if (s == "spade") return Conditioning::spade;
    if (s == "concat") return Conditioning::concat;
    throw std::invalid_argument("unknown conditioning '" + s + "' (expected spade or concat)");
}

void ModelConfig::validate() const {
    auto fail = [](const std::string& msg) { throw std::invalid_argument("ModelConfig: " + msg); };
    if (image_size < 1 || image_channels < 1) fail("image size and channels must be positive");
    if (num_classes < 1) fail("num_classes must be positive");
    if (base_channels < 2 || base_channels % 2 != 0) fail("base_channels must be even and >= 2");
    if (channel_multipliers.empty()) fail("at least one level is required");
    for (int m : channel_multipliers) {
        if (m < 1) fail("channel multipliers must be positive");
    }
    if (num_res_blocks < 1) fail("num_res_blocks must be positive");
    if (head_channels < 1) fail("head_channels must be positive");
    if (spade_hidden_channels < 1) fail("spade_hidden_channels must be positive");
    const int factor = 1 << (num_levels() - 1);
    if (image_size % factor != 0) {
        fail("image_size " + std::to_string(image_size) + " not divisible by 2^(levels-1) = " +
             std::to_string(factor));
    }
    for (int r : attention_resolutions) {
        bool realizable = false;
        for (int level = 0; level < num_levels(); ++level) {
            realizable |= (image_size >> level) == r;
        }
        if (!realizable) fail("attention resolution " + std::to_string(r) + " is never reached");
    }
}

int norm_groups(int channels) {
    for (int g = std::min(32, channels); g > 1; --g) {
        if (channels % g == 0) return g;
    }
    return 1;
}

torch::Tensor sinusoidal_embedding(const std::vector<int>& timesteps, int dim,
                                   torch::TensorOptions options) {
    const int half = dim / 2;
    std::vector<double> t(timesteps.begin(), timesteps.end());
    auto ts = torch::tensor(t, torch::kFloat64).unsqueeze(1);
    auto freqs = torch::exp(-std::log(10000.0) * torch::arange(half, torch::kFloat64) / half)
                     .unsqueeze(0);
    auto angles = ts * freqs;
    return torch::cat({torch::cos(angles), torch::sin(angles)}, 1).to(options.dtype());
}

torch::Tensor timestep_modulate(const torch::Tensor& features, const torch::Tensor& weight,
                                const torch::Tensor& bias) {
    if (features.dim() != 4 || weight.dim() != 2 || bias.sizes() != weight.sizes() ||
        weight.size(0) != features.size(0) || weight.size(1) != features.size(1)) {
        throw std::invalid_argument("timestep_modulate: expected [B, C] weight/bias for [B, C, H, W] features");
    }
    const auto b = features.size(0);
    const auto c = features.size(1);
    return weight.view({b, c, 1, 1}) * features + bias.view({b, c, 1, 1});
}

torch::Tensor spade_modulate(const torch::Tensor& normalized, const torch::Tensor& gamma,
                             const torch::Tensor& beta) {
    if (gamma.sizes() != normalized.sizes() || beta.sizes() != normalized.sizes()) {
        throw std::invalid_argument("spade_modulate: gamma/beta must match the feature shape");
    }
    return gamma * normalized + beta;
}

torch::Tensor parameter_free_group_norm(const torch::Tensor& features) {
    return torch::group_norm(features, norm_groups(static_cast<int>(features.size(1))));
}

// ---------------------------------------------------------------------------

TimestepEmbedderImpl::TimestepEmbedderImpl(int base_channels, int embed_dim)
    : base_channels_(base_channels) {
    fc1_ = register_module("fc1", nn::Linear(base_channels, embed_dim));
    fc2_ = register_module("fc2", nn::Linear(embed_dim, embed_dim));
}

torch::Tensor TimestepEmbedderImpl::forward(const std::vector<int>& timesteps) {
    auto options = fc1_->weight.options();
    auto h = sinusoidal_embedding(timesteps, base_channels_, options).to(options.device());
    return fc2_(F::silu(fc1_(h)));
}

TimestepModulationImpl::TimestepModulationImpl(int embed_dim, int channels) {
    proj = register_module("proj", nn::Linear(embed_dim, 2 * channels));
}

std::pair<torch::Tensor, torch::Tensor> TimestepModulationImpl::scale_shift(const torch::Tensor& emb) {
    auto out = proj(F::silu(emb));
    auto parts = out.chunk(2, 1);
    return {1.0 + parts[0], parts[1]};
}

torch::Tensor TimestepModulationImpl::forward(const torch::Tensor& features, const torch::Tensor& emb) {
    auto [w, b] = scale_shift(emb);
    return timestep_modulate(features, w, b);
}

// ---------------------------------------------------------------------------

SpadeImpl::SpadeImpl(int feature_channels, int layout_channels, int hidden_channels)
    : layout_channels_(layout_channels) {
    trunk = register_module(
        "trunk", nn::Conv2d(nn::Conv2dOptions(layout_channels, hidden_channels, 3).padding(1)));
    gamma_head = register_module(
        "gamma", nn::Conv2d(nn::Conv2dOptions(hidden_channels, feature_channels, 3).padding(1)));
    beta_head = register_module(
        "beta", nn::Conv2d(nn::Conv2dOptions(hidden_channels, feature_channels, 3).padding(1)));
}

std::pair<torch::Tensor, torch::Tensor> SpadeImpl::modulation(const torch::Tensor& condition,
                                                              int64_t height, int64_t width) {
    if (condition.dim() != 4 || condition.size(1) != layout_channels_) {
        throw std::invalid_argument("Spade: expected " + std::to_string(layout_channels_) +
                                    " layout channels, got " +
                                    std::to_string(condition.dim() == 4 ? condition.size(1) : -1));
    }
    auto resized = condition;
    if (condition.size(2) != height || condition.size(3) != width) {
        resized = F::interpolate(condition, F::InterpolateFuncOptions()
                                                .size(std::vector<int64_t>{height, width})
                                                .mode(torch::kNearest));
    }
    auto hidden = F::silu(trunk(resized));
    return {1.0 + gamma_head(hidden), beta_head(hidden)};
}

torch::Tensor SpadeImpl::forward(const torch::Tensor& features, const torch::Tensor& condition) {
    auto [gamma, beta] = modulation(condition, features.size(2), features.size(3));
    return spade_modulate(parameter_free_group_norm(features), gamma, beta);
}

// ---------------------------------------------------------------------------

AttentionBlockImpl::AttentionBlockImpl(int channels, int head_channels) : channels_(channels) {
    num_heads_ = std::max(1, channels / head_channels);
    if (channels % num_heads_ != 0) {
        throw std::invalid_argument("AttentionBlock: channels not divisible into heads");
    }
    auto conv1x1 = [&](const char* name) {
        return register_module(name, nn::Conv2d(nn::Conv2dOptions(channels, channels, 1).bias(false)));
    };
    w_f = conv1x1("w_f");
    w_g = conv1x1("w_g");
    w_h = conv1x1("w_h");
    w_v = conv1x1("w_v");
    alpha = register_parameter("alpha", torch::full({num_heads_}, 10.0));
    torch::NoGradGuard guard;
    w_v->weight.zero_();
}

torch::Tensor AttentionBlockImpl::forward(const torch::Tensor& x) {
    if (x.dim() != 4 || x.size(1) != channels_) {
        throw std::invalid_argument("AttentionBlock: expected " + std::to_string(channels_) +
                                    " channels");
    }
    const auto b = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
    const auto n = h * w;
    const auto d = c / num_heads_;
    auto split = [&](const torch::Tensor& t) { return t.reshape({b, num_heads_, d, n}); };
    auto normalize = [](const torch::Tensor& t) {
        return t / t.norm(2, {2}, true).clamp_min(1e-6);
    };
    auto f = normalize(split(w_f(x)));
    auto g = normalize(split(w_g(x)));
    auto v = split(w_h(x));
    // affinity[u, v] = cos(f(x_u), g(x_v)), softmax over v
    auto affinity = torch::matmul(f.transpose(2, 3), g);
    auto weights = torch::softmax(alpha.view({1, num_heads_, 1, 1}) * affinity, -1);
    auto mixed = torch::matmul(v, weights.transpose(2, 3));
    return x + w_v(mixed.reshape({b, c, h, w}));
}

// ---------------------------------------------------------------------------

ResBlockImpl::ResBlockImpl(int in_channels, int out_channels, int embed_dim, int layout_channels,
                           int spade_hidden, bool use_spade)
    : use_spade_(use_spade) {
    if (use_spade) {
        in_spade_ = register_module("in_spade", Spade(in_channels, layout_channels, spade_hidden));
        out_spade_ = register_module("out_spade", Spade(out_channels, layout_channels, spade_hidden));
    } else {
        in_norm_ = register_module(
            "in_norm", nn::GroupNorm(nn::GroupNormOptions(norm_groups(in_channels), in_channels)));
        out_norm_ = register_module(
            "out_norm", nn::GroupNorm(nn::GroupNormOptions(norm_groups(out_channels), out_channels)));
    }
    in_conv_ = register_module(
        "in_conv", nn::Conv2d(nn::Conv2dOptions(in_channels, out_channels, 3).padding(1)));
    out_conv_ = register_module(
        "out_conv", nn::Conv2d(nn::Conv2dOptions(out_channels, out_channels, 3).padding(1)));
    modulation_ = register_module("modulation", TimestepModulation(embed_dim, out_channels));
    if (in_channels != out_channels) {
        skip_ = register_module("skip", nn::Conv2d(nn::Conv2dOptions(in_channels, out_channels, 1)));
    }
    torch::NoGradGuard guard;
    out_conv_->weight.zero_();
    out_conv_->bias.zero_();
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& emb,
                                    const torch::Tensor& condition) {
    auto h = use_spade_ ? in_spade_(x, condition) : in_norm_(x);
    h = in_conv_(F::silu(h));
    h = use_spade_ ? out_spade_(h, condition) : out_norm_(h);
    h = modulation_(h, emb);
    h = out_conv_(F::silu(h));
    return (skip_ ? skip_(x) : x) + h;
}

std::vector<Spade> ResBlockImpl::spade_layers() const {
    if (!use_spade_) return {};
    return {in_spade_, out_spade_};
}

// ---------------------------------------------------------------------------

UNetImpl::UNetImpl(ModelConfig config) : config_(std::move(config)) {
    config_.validate();
    const int base = config_.base_channels;
    const int embed_dim = 4 * base;
    const int layout_ch = config_.layout_channels();
    const bool spade = config_.conditioning == Conditioning::spade;
    const int input_ch = config_.image_channels + (spade ? 0 : layout_ch);
    auto wants_attention = [&](int level) {
        const int res = config_.image_size >> level;
        const auto& a = config_.attention_resolutions;
        return std::find(a.begin(), a.end(), res) != a.end();
    };

    time_embed_ = register_module("time_embed", TimestepEmbedder(base, embed_dim));
    input_conv_ = register_module("input_conv", nn::Conv2d(nn::Conv2dOptions(input_ch, base, 3).padding(1)));

    std::vector<int> skip_channels{base};
    int ch = base;
    for (int level = 0; level < config_.num_levels(); ++level) {
        const int out_ch = base * config_.channel_multipliers[level];
        for (int i = 0; i < config_.num_res_blocks; ++i) {
            Stage stage;
            const auto prefix = "enc" + std::to_string(encoder_.size());
            stage.block = register_module(prefix + "_block",
                                          ResBlock(ch, out_ch, embed_dim, layout_ch,
                                                   config_.spade_hidden_channels, false));
            if (wants_attention(level)) {
                stage.attention = register_module(prefix + "_attn", AttentionBlock(out_ch, config_.head_channels));
            }
            ch = out_ch;
            encoder_.push_back(stage);
            skip_channels.push_back(ch);
        }
        if (level + 1 < config_.num_levels()) {
            Stage stage;
            const auto prefix = "enc" + std::to_string(encoder_.size());
            stage.resample = register_module(
                prefix + "_down", nn::Conv2d(nn::Conv2dOptions(ch, ch, 3).stride(2).padding(1)));
            encoder_.push_back(stage);
            skip_channels.push_back(ch);
        }
    }

    middle_first_ = register_module(
        "mid_block1", ResBlock(ch, ch, embed_dim, layout_ch, config_.spade_hidden_channels, spade));
    middle_attention_ = register_module("mid_attn", AttentionBlock(ch, config_.head_channels));
    middle_second_ = register_module(
        "mid_block2", ResBlock(ch, ch, embed_dim, layout_ch, config_.spade_hidden_channels, spade));

    for (int level = config_.num_levels() - 1; level >= 0; --level) {
        const int out_ch = base * config_.channel_multipliers[level];
        for (int i = 0; i <= config_.num_res_blocks; ++i) {
            Stage stage;
            const auto prefix = "dec" + std::to_string(decoder_.size());
            const int skip_ch = skip_channels.back();
            skip_channels.pop_back();
            stage.block = register_module(prefix + "_block",
                                          ResBlock(ch + skip_ch, out_ch, embed_dim, layout_ch,
                                                   config_.spade_hidden_channels, spade));
            ch = out_ch;
            if (wants_attention(level)) {
                stage.attention = register_module(prefix + "_attn", AttentionBlock(ch, config_.head_channels));
            }
            if (level > 0 && i == config_.num_res_blocks) {
                stage.resample = register_module(
                    prefix + "_up", nn::Conv2d(nn::Conv2dOptions(ch, ch, 3).padding(1)));
            }
            decoder_.push_back(stage);
        }
    }

    out_norm_ = register_module("out_norm", nn::GroupNorm(nn::GroupNormOptions(norm_groups(ch), ch)));
    out_conv_ = register_module(
        "out_conv", nn::Conv2d(nn::Conv2dOptions(ch, 2 * config_.image_channels, 3).padding(1)));
    torch::NoGradGuard guard;
    out_conv_->weight.zero_();
    out_conv_->bias.zero_();
}

DenoiserOutput UNetImpl::forward(const torch::Tensor& y_t, const torch::Tensor& condition,
                                 const std::vector<int>& timesteps) {
    const int64_t s = config_.image_size;
    if (y_t.dim() != 4 || y_t.size(1) != config_.image_channels || y_t.size(2) != s || y_t.size(3) != s) {
        throw std::invalid_argument("UNet: expected image batch [B, " +
                                    std::to_string(config_.image_channels) + ", " + std::to_string(s) +
                                    ", " + std::to_string(s) + "]");
    }
    const auto batch = y_t.size(0);
    if (condition.dim() != 4 || condition.size(0) != batch ||
        condition.size(1) != config_.layout_channels() || condition.size(2) != s || condition.size(3) != s) {
        throw std::invalid_argument("UNet: expected condition [B, " +
                                    std::to_string(config_.layout_channels()) + ", " + std::to_string(s) +
                                    ", " + std::to_string(s) + "]");
    }
    if (static_cast<int64_t>(timesteps.size()) != batch) {
        throw std::invalid_argument("UNet: one timestep per example is required");
    }
    for (int t : timesteps) {
        if (t < 1) throw std::out_of_range("UNet: timestep " + std::to_string(t) + " < 1");
    }

    const auto cond = condition.to(y_t.scalar_type());
    const auto emb = time_embed_(timesteps);
    const bool spade = config_.conditioning == Conditioning::spade;

    auto h = input_conv_(spade ? y_t : torch::cat({y_t, cond}, 1));
    std::vector<torch::Tensor> skips{h};
    for (auto& stage : encoder_) {
        if (stage.block) {
            // the encoder never sees the layout
            h = stage.block(h, emb, torch::Tensor());
            if (stage.attention) h = stage.attention(h);
        } else {
            h = stage.resample(h);
        }
        skips.push_back(h);
    }

    h = middle_first_(h, emb, cond);
    h = middle_attention_(h);
    h = middle_second_(h, emb, cond);

    for (auto& stage : decoder_) {
        h = torch::cat({h, skips.back()}, 1);
        skips.pop_back();
        h = stage.block(h, emb, cond);
        if (stage.attention) h = stage.attention(h);
        if (stage.resample) {
            h = F::interpolate(h, F::InterpolateFuncOptions()
                                      .scale_factor(std::vector<double>{2.0, 2.0})
                                      .mode(torch::kNearest));
            h = stage.resample(h);
        }
    }

    auto out = out_conv_(F::silu(out_norm_(h)));
    auto parts = out.chunk(2, 1);
    DenoiserOutput result;
    result.eps = parts[0];
    result.v = (torch::tanh(parts[1]) + 1.0) / 2.0;
    return result;
}

std::vector<Spade> UNetImpl::spade_layers() const {
    std::vector<Spade> out;
    auto add = [&](const ResBlock& b) {
        for (auto& s : b->spade_layers()) out.push_back(s);
    };
    add(middle_first_);
    add(middle_second_);
    for (const auto& stage : decoder_) add(stage.block);
    return out;
}

std::vector<AttentionBlock> UNetImpl::attention_blocks() const {
    std::vector<AttentionBlock> out;
    for (const auto& stage : encoder_) {
        if (stage.attention) out.push_back(stage.attention);
    }
    out.push_back(middle_attention_);
    for (const auto& stage : decoder_) {
        if (stage.attention) out.push_back(stage.attention);
    }
    return out;
}

SemanticLayout encode_null_layout(const ModelConfig& config) {
    return make_null_layout(config.num_classes, config.use_edge_map, config.image_size, config.image_size);
}

DenoiserOutput unet_forward(UNet& net, const torch::Tensor& y_t, const torch::Tensor& condition, int t) {
    return net->forward(y_t, condition, std::vector<int>(y_t.size(0), t));
}

void randomize_parameters(torch::nn::Module& module, double stddev, uint64_t seed) {
    torch::NoGradGuard guard;
    auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
    for (auto& p : module.parameters()) {
        p.copy_(at::normal(0.0, stddev, p.sizes(), gen, p.options()));
    }
}

int64_t count_parameters(const torch::nn::Module& module) {
    int64_t n = 0;
    for (const auto& p : module.parameters()) n += p.numel();
    return n;
}

}  // namespace sdm
