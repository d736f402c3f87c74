#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <vector>

#include "sdm/checkpoint.hpp"
#include "sdm/dataset.hpp"
#include "sdm/sampler.hpp"

namespace sdm {

// A loaded model ready for sampling. Shared by the CLI and the service so the
// two produce byte-identical PNGs for identical requests.
struct InferenceModel {
    ModelConfig config;
    SceneSpec scene;
    NoiseSchedule schedule;
    Denoiser denoiser;

    static InferenceModel from_checkpoint(const Checkpoint& ckpt);
};

using Png = std::vector<uint8_t>;

// Nearest-neighbour resize of an integer map [H, W] to size x size.
torch::Tensor resize_nearest(const torch::Tensor& map, int64_t size);

// Condition for a class-id map. Without instance ids the edge channel is
// computed from class boundaries.
SemanticLayout layout_from_labels(const torch::Tensor& labels, const ModelConfig& config);

std::vector<Png> generate_pngs(const InferenceModel& model, const torch::Tensor& labels, const SamplerConfig& config,
                               const ProgressCallback& progress = {});

// source: [3, H, W] in [-1, 1]; mask: [H, W], 1 = regenerate.
std::vector<Png> edit_pngs(const InferenceModel& model, const torch::Tensor& source, const torch::Tensor& labels,
                           const torch::Tensor& mask, const SamplerConfig& config,
                           const ProgressCallback& progress = {});

}  // namespace sdm
