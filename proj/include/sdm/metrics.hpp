#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sdm/dataset.hpp"
#include "sdm/sampler.hpp"

namespace sdm {

inline constexpr double kBackgroundSaturation = 0.15;

// Nearest-hue classification of a [3, H, W] image in [-1, 1]. Pixels with
// saturation below the threshold go to the class whose hue is negative (the
// background). Returns int64 [H, W].
torch::Tensor hue_segment(const torch::Tensor& image, const std::vector<double>& hues,
                          double min_saturation = kBackgroundSaturation);

// Pooled confusion counts over a set of (predicted, reference) label maps.
class ConfusionMatrix {
public:
    explicit ConfusionMatrix(int num_classes);

    void add(const torch::Tensor& predicted, const torch::Tensor& reference);
    int num_classes() const { return n_; }
    int64_t at(int reference, int predicted) const { return counts_[reference * n_ + predicted]; }
    bool present(int cls) const;  // appears in the references
    double iou(int cls) const;
    double mean_iou() const;      // over present classes
    std::vector<double> per_class_iou() const;  // NaN for absent classes

private:
    int n_;
    std::vector<int64_t> counts_;
};

// Segments each image with hue_segment and scores it against its label map.
double toy_miou(const std::vector<torch::Tensor>& images, const std::vector<torch::Tensor>& labels,
                const std::vector<double>& hues, std::vector<double>* per_class = nullptr);

// Mean root-mean-square distance over unordered pairs.
double diversity_score(const std::vector<torch::Tensor>& samples);

struct EvalSettings {
    int num_layouts = 200;
    int seeds_per_layout = 4;
    uint64_t layout_seed = 0x5EED0F7E57ULL;  // held-out scenes, disjoint from training seeds
    SamplerConfig sampler;
    int batch_size = 32;
};

struct EvalReport {
    double toy_miou = 0.0;
    double diversity = 0.0;
    std::vector<double> per_class_iou;
    int num_samples = 0;
    nlohmann::json config;

    nlohmann::json to_json() const;
    std::string table(const std::vector<std::string>& class_names) const;
};

// Held-out layouts for evaluation: generate_dataset(spec, n, settings.layout_seed).
Dataset heldout_layouts(const SceneSpec& spec, const EvalSettings& settings);

// Samples seeds_per_layout images for every held-out layout (seed of sample j
// of layout i: sample_seeds(derive_seed(sampler.seed, i), k)[j]).
EvalReport evaluate(const Denoiser& denoiser, const NoiseSchedule& schedule, const Dataset& layouts,
                    const EvalSettings& settings, int image_channels = 3,
                    const ProgressCallback& progress = {});

struct AblationVariant {
    std::string name;
    std::filesystem::path checkpoint;
    bool guidance = true;
};

struct AblationRow {
    AblationVariant variant;
    std::string conditioning;
    EvalReport report;
};

// Evaluates each variant on identical held-out layouts, seeds and step budget.
std::vector<AblationRow> run_ablation(const std::vector<AblationVariant>& variants, const EvalSettings& settings,
                                      const ProgressCallback& progress = {});

// The standard four-row comparison: spade/concat checkpoints, guided and not.
std::vector<AblationVariant> standard_ablation(const std::filesystem::path& spade_checkpoint,
                                               const std::filesystem::path& concat_checkpoint);

std::string format_ablation_table(const std::vector<AblationRow>& rows);
nlohmann::json ablation_to_json(const std::vector<AblationRow>& rows);

}  // namespace sdm
