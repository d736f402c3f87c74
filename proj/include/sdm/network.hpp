#pragma once

#include <torch/torch.h>

#include <string>
#include <utility>
#include <vector>

#include "sdm/layout.hpp"
#include "sdm/losses.hpp"

namespace sdm {

// How the layout reaches the network. `spade` is the semantic diffusion
// design (decoder-only spatially-adaptive normalization); `concat` feeds the
// layout as extra input channels next to the noisy image and uses plain
// group normalization everywhere. The latter exists for ablations.
enum class Conditioning { spade, concat };

std::string to_string(Conditioning c);
Conditioning conditioning_from_string(const std::string& s);

struct ModelConfig {
    int image_size = 32;
    int image_channels = 3;
    int num_classes = 8;
    int base_channels = 64;
    std::vector<int> channel_multipliers{1, 2, 4, 4};
    int num_res_blocks = 1;
    std::vector<int> attention_resolutions{8, 4};
    int head_channels = 32;
    int spade_hidden_channels = 64;
    bool use_edge_map = true;
    Conditioning conditioning = Conditioning::spade;

    int num_levels() const { return static_cast<int>(channel_multipliers.size()); }
    int layout_channels() const { return num_classes + (use_edge_map ? 1 : 0); }
    // Throws std::invalid_argument describing the first violated constraint.
    void validate() const;

    bool operator==(const ModelConfig&) const = default;
};

// Groups used by every group normalization over `channels` features: the
// largest divisor of `channels` not exceeding 32.
int norm_groups(int channels);

// Sinusoidal features of each timestep, [B, dim].
torch::Tensor sinusoidal_embedding(const std::vector<int>& timesteps, int dim,
                                   torch::TensorOptions options = {});

// w(t) * f + b(t) with w, b of shape [B, C] broadcast over space.
torch::Tensor timestep_modulate(const torch::Tensor& features, const torch::Tensor& weight,
                                const torch::Tensor& bias);

// gamma * normalized + beta with per-site gamma, beta.
torch::Tensor spade_modulate(const torch::Tensor& normalized, const torch::Tensor& gamma,
                             const torch::Tensor& beta);

torch::Tensor parameter_free_group_norm(const torch::Tensor& features);

class TimestepEmbedderImpl : public torch::nn::Module {
public:
    TimestepEmbedderImpl(int base_channels, int embed_dim);
    torch::Tensor forward(const std::vector<int>& timesteps);

private:
    int base_channels_;
    torch::nn::Linear fc1_{nullptr}, fc2_{nullptr};
};
TORCH_MODULE(TimestepEmbedder);

// Per-block projection of the timestep embedding to (w(t), b(t)).
// w is parameterized as 1 + projection so a zero projection is the identity.
class TimestepModulationImpl : public torch::nn::Module {
public:
    TimestepModulationImpl(int embed_dim, int channels);
    std::pair<torch::Tensor, torch::Tensor> scale_shift(const torch::Tensor& emb);
    torch::Tensor forward(const torch::Tensor& features, const torch::Tensor& emb);

    torch::nn::Linear proj{nullptr};
};
TORCH_MODULE(TimestepModulation);

// Spatially-adaptive normalization. gamma = 1 + head output, so zeroing the
// gamma head gives gamma = 1.
class SpadeImpl : public torch::nn::Module {
public:
    SpadeImpl(int feature_channels, int layout_channels, int hidden_channels);
    std::pair<torch::Tensor, torch::Tensor> modulation(const torch::Tensor& condition, int64_t height,
                                                       int64_t width);
    torch::Tensor forward(const torch::Tensor& features, const torch::Tensor& condition);

    torch::nn::Conv2d trunk{nullptr}, gamma_head{nullptr}, beta_head{nullptr};

private:
    int layout_channels_;
};
TORCH_MODULE(Spade);

// Multi-head self-attention with cosine-normalized affinities and a
// learnable per-head temperature alpha.
class AttentionBlockImpl : public torch::nn::Module {
public:
    AttentionBlockImpl(int channels, int head_channels);
    torch::Tensor forward(const torch::Tensor& x);

    int num_heads() const { return num_heads_; }

    torch::nn::Conv2d w_f{nullptr}, w_g{nullptr}, w_h{nullptr}, w_v{nullptr};
    torch::Tensor alpha;

private:
    int channels_;
    int num_heads_;
};
TORCH_MODULE(AttentionBlock);

// Residual block. With a SPADE layer it is the decoder block that injects the
// layout; without it, the encoder block (group norm + timestep modulation).
class ResBlockImpl : public torch::nn::Module {
public:
    ResBlockImpl(int in_channels, int out_channels, int embed_dim, int layout_channels,
                 int spade_hidden, bool use_spade);
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& emb,
                          const torch::Tensor& condition);

    bool uses_spade() const { return use_spade_; }
    std::vector<Spade> spade_layers() const;

private:
    bool use_spade_;
    torch::nn::GroupNorm in_norm_{nullptr}, out_norm_{nullptr};
    Spade in_spade_{nullptr}, out_spade_{nullptr};
    torch::nn::Conv2d in_conv_{nullptr}, out_conv_{nullptr}, skip_{nullptr};
    TimestepModulation modulation_{nullptr};
};
TORCH_MODULE(ResBlock);

class UNetImpl : public torch::nn::Module {
public:
    explicit UNetImpl(ModelConfig config);

    // y_t: [B, C_img, S, S]; condition: [B, L, S, S]; timesteps: the
    // (original, unrespaced) timestep of each example.
    DenoiserOutput forward(const torch::Tensor& y_t, const torch::Tensor& condition,
                           const std::vector<int>& timesteps);

    const ModelConfig& config() const { return config_; }
    std::vector<Spade> spade_layers() const;
    std::vector<AttentionBlock> attention_blocks() const;

private:
    struct Stage {
        ResBlock block{nullptr};
        AttentionBlock attention{nullptr};
        torch::nn::Conv2d resample{nullptr};  // down- or up-sampling conv after the block
    };

    ModelConfig config_;
    TimestepEmbedder time_embed_{nullptr};
    torch::nn::Conv2d input_conv_{nullptr};
    std::vector<Stage> encoder_;
    ResBlock middle_first_{nullptr}, middle_second_{nullptr};
    AttentionBlock middle_attention_{nullptr};
    std::vector<Stage> decoder_;
    torch::nn::GroupNorm out_norm_{nullptr};
    torch::nn::Conv2d out_conv_{nullptr};
};
TORCH_MODULE(UNet);

// All-zero condition for the given model.
SemanticLayout encode_null_layout(const ModelConfig& config);

DenoiserOutput unet_forward(UNet& net, const torch::Tensor& y_t, const torch::Tensor& condition,
                            int t);

// Draws every parameter from N(0, stddev^2); used by tests that need the
// zero-initialized output paths to carry signal.
void randomize_parameters(torch::nn::Module& module, double stddev, uint64_t seed);

int64_t count_parameters(const torch::nn::Module& module);

}  // namespace sdm
