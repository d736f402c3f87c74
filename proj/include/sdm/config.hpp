#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "sdm/dataset.hpp"
#include "sdm/network.hpp"
#include "sdm/sampler.hpp"
#include "sdm/trainer.hpp"

namespace sdm {

struct DataConfig {
    SceneSpec scene;
    int count = 4000;
    uint64_t seed = 1;
};

struct ServiceConfig {
    std::string host = "127.0.0.1";
    int port = 8080;
    int workers = 1;
    int queue_capacity = 8;
};

// Everything a run needs. INI sections: [model] (including the schedule keys
// diffusion_steps, beta_start, beta_end), [loss], [train], [sample], [data],
// [serve]. An optional top-level `preset` key selects the starting values.
struct AppConfig {
    ModelConfig model;
    DiffusionConfig diffusion;
    TrainConfig train;
    SamplerConfig sample;
    DataConfig data;
    ServiceConfig serve;
};

// 32x32 scenes, four-level U-Net (64, 128, 256, 256), attention at 8 and 4.
AppConfig desk_preset();
// 16x16 scenes and a three-level U-Net small enough to train on one CPU core.
AppConfig cpu16_preset();
AppConfig preset(const std::string& name);

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

AppConfig parse_config(const std::string& text, const std::string& origin = "<string>");
AppConfig load_config(const std::filesystem::path& path);
std::string format_config(const AppConfig& config);

// --config if given, else $SDM_CONFIG if set, else nullopt.
std::optional<std::filesystem::path> resolve_config_path(const std::optional<std::string>& flag);

}  // namespace sdm
