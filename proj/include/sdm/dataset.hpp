#pragma once

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "sdm/layout.hpp"

namespace sdm {

// Procedural scenes: class 0 is a gray background, classes 1..C-1 are
// shapes (circle, rectangle, triangle by class) colored at evenly spaced
// hues on the color wheel.
struct SceneSpec {
    int image_size = 32;
    int num_classes = 8;
    int min_shapes = 1;
    int max_shapes = 4;
    double min_value = 0.65;  // per-instance brightness jitter range (HSV value)
    double max_value = 0.95;
    double saturation = 0.85;
    double background_min_value = 0.35;
    double background_max_value = 0.55;
    bool texture = true;
    double texture_amplitude = 0.03;
    bool use_edge_map = true;

    // Hue in degrees for each class; negative for the achromatic background.
    std::vector<double> class_hues() const;
    std::vector<std::string> class_names() const;
    // Representative RGB color per class, also used as the PNG palette.
    std::vector<std::array<uint8_t, 3>> palette() const;
    void validate() const;

    bool operator==(const SceneSpec&) const = default;
};

struct Scene {
    torch::Tensor labels;     // [H, W] int64 class ids
    torch::Tensor instances;  // [H, W] int64, 0 = background, 1.. = shapes
    torch::Tensor image;      // [3, H, W] float in [-1, 1]
    SemanticLayout layout;
};

Scene generate_scene(const SceneSpec& spec, uint64_t seed);

torch::Tensor one_hot(const torch::Tensor& labels, int num_classes);

// 1 where any in-bounds 4-neighbor carries a different instance id.
torch::Tensor edge_map(const torch::Tensor& instances);

SemanticLayout make_layout(const torch::Tensor& labels, const torch::Tensor& instances, int num_classes,
                           bool use_edge_map);

// With probability p the null layout, otherwise the input unchanged.
SemanticLayout drop_label(const SemanticLayout& layout, double p, std::mt19937_64& rng);
// The coin flip drop_label uses, exposed so batch code can count drops.
bool should_drop_label(double p, std::mt19937_64& rng);

// HSV (h in degrees, s and v in [0, 1]) to RGB in [0, 1], and back.
std::array<double, 3> hsv_to_rgb(double h, double s, double v);
std::array<double, 3> rgb_to_hsv(double r, double g, double b);

struct Dataset {
    SceneSpec spec;
    uint64_t base_seed = 0;
    std::vector<Scene> scenes;

    size_t size() const { return scenes.size(); }
};

// Scene i uses seed derive_seed(base_seed, i).
Dataset generate_dataset(const SceneSpec& spec, int count, uint64_t base_seed);

// Directory layout: NNNNNN_image.png (RGB), NNNNNN_label.png (palette index =
// class id), NNNNNN_instance.png (16-bit gray), manifest.json.
void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace sdm
