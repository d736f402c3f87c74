#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "sdm/dataset.hpp"
#include "sdm/network.hpp"
#include "sdm/trainer.hpp"

namespace sdm {

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr uint32_t kCheckpointVersion = 1;

// On-disk layout (all integers little-endian):
//   "SDMCKPT\0"            8-byte magic
//   u32 version
//   u64 manifest size, manifest bytes (JSON: configs, step, rng, array table)
//   payload: each array as little-endian float32, in manifest order
//   u32 CRC-32 of everything before it
// Each array entry also carries its own CRC-32 and explicit shape.
struct Checkpoint {
    ModelConfig model_config;
    TrainConfig train_config;
    DiffusionConfig diffusion;
    SceneSpec scene_spec;
    int64_t step = 0;
    int64_t optimizer_steps = 0;
    // Training randomness is a pure function of (rng_seed, step).
    uint64_t rng_seed = 0;
    // "model/<param>", "ema/<param>", "adam_m/<param>", "adam_v/<param>".
    std::map<std::string, torch::Tensor> arrays;
};

std::vector<uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(const std::vector<uint8_t>& bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

Checkpoint checkpoint_from_state(const TrainState& state);
TrainState state_from_checkpoint(const Checkpoint& ckpt);

// Network carrying the EMA weights, ready for sampling.
UNet load_ema_model(const Checkpoint& ckpt);

}  // namespace sdm
