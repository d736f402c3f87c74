#include "sdm/metrics.hpp"

#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "sdm/checkpoint.hpp"
#include "sdm/serialization.hpp"

namespace sdm {

namespace {

double hue_distance(double a, double b) {
    const double d = std::fabs(a - b);
    return std::min(d, 360.0 - d);
}

}  // namespace

torch::Tensor hue_segment(const torch::Tensor& image, const std::vector<double>& hues, double min_saturation) {
    if (hues.empty()) throw std::invalid_argument("hue_segment: empty palette");
    if (image.dim() != 3 || image.size(0) != 3) throw std::invalid_argument("hue_segment: expected a [3, H, W] image");
    int64_t background = -1;
    for (size_t k = 0; k < hues.size(); ++k) {
        if (hues[k] < 0) {
            background = static_cast<int64_t>(k);
            break;
        }
    }
    const auto h = image.size(1), w = image.size(2);
    const auto img = ((image.detach().to(torch::kCPU, torch::kDouble) + 1.0) * 0.5).clamp(0.0, 1.0).contiguous();
    const auto a = img.accessor<double, 3>();
    auto out = torch::zeros({h, w}, torch::kInt64);
    auto o = out.accessor<int64_t, 2>();
    for (int64_t y = 0; y < h; ++y) {
        for (int64_t x = 0; x < w; ++x) {
            const auto hsv = rgb_to_hsv(a[0][y][x], a[1][y][x], a[2][y][x]);
            if (background >= 0 && hsv[1] < min_saturation) {
                o[y][x] = background;
                continue;
            }
            double best = std::numeric_limits<double>::infinity();
            int64_t arg = background >= 0 ? background : 0;
            for (size_t k = 0; k < hues.size(); ++k) {
                if (hues[k] < 0) continue;
                const double d = hue_distance(hsv[0], hues[k]);
                if (d < best) {
                    best = d;
                    arg = static_cast<int64_t>(k);
                }
            }
            o[y][x] = arg;
        }
    }
    return out;
}

ConfusionMatrix::ConfusionMatrix(int num_classes) : n_(num_classes), counts_(size_t(num_classes) * num_classes, 0) {
    if (num_classes < 1) throw std::invalid_argument("ConfusionMatrix: need at least one class");
}

void ConfusionMatrix::add(const torch::Tensor& predicted, const torch::Tensor& reference) {
    if (predicted.sizes() != reference.sizes()) throw std::invalid_argument("ConfusionMatrix: shape mismatch");
    const auto p = predicted.to(torch::kInt64).contiguous().reshape({-1});
    const auto r = reference.to(torch::kInt64).contiguous().reshape({-1});
    const auto* pp = p.data_ptr<int64_t>();
    const auto* rp = r.data_ptr<int64_t>();
    for (int64_t i = 0; i < p.numel(); ++i) {
        if (pp[i] < 0 || pp[i] >= n_ || rp[i] < 0 || rp[i] >= n_) {
            throw std::invalid_argument("ConfusionMatrix: label out of range");
        }
        ++counts_[rp[i] * n_ + pp[i]];
    }
}

bool ConfusionMatrix::present(int cls) const {
    for (int j = 0; j < n_; ++j) {
        if (at(cls, j) > 0) return true;
    }
    return false;
}

double ConfusionMatrix::iou(int cls) const {
    int64_t tp = at(cls, cls), fp = 0, fn = 0;
    for (int j = 0; j < n_; ++j) {
        if (j == cls) continue;
        fn += at(cls, j);
        fp += at(j, cls);
    }
    const auto denom = tp + fp + fn;
    return denom == 0 ? std::numeric_limits<double>::quiet_NaN() : static_cast<double>(tp) / static_cast<double>(denom);
}

std::vector<double> ConfusionMatrix::per_class_iou() const {
    std::vector<double> out(n_);
    for (int k = 0; k < n_; ++k) out[k] = present(k) ? iou(k) : std::numeric_limits<double>::quiet_NaN();
    return out;
}

double ConfusionMatrix::mean_iou() const {
    double sum = 0.0;
    int count = 0;
    for (int k = 0; k < n_; ++k) {
        if (!present(k)) continue;
        sum += iou(k);
        ++count;
    }
    return count == 0 ? 0.0 : sum / count;
}

double toy_miou(const std::vector<torch::Tensor>& images, const std::vector<torch::Tensor>& labels,
                const std::vector<double>& hues, std::vector<double>* per_class) {
    if (images.size() != labels.size()) throw std::invalid_argument("toy_miou: images and layouts differ in count");
    if (images.empty()) throw std::invalid_argument("toy_miou: no images");
    ConfusionMatrix cm(static_cast<int>(hues.size()));
    for (size_t i = 0; i < images.size(); ++i) cm.add(hue_segment(images[i], hues), labels[i]);
    if (per_class) *per_class = cm.per_class_iou();
    return cm.mean_iou();
}

double diversity_score(const std::vector<torch::Tensor>& samples) {
    if (samples.size() < 2) throw std::invalid_argument("diversity_score: need at least two samples");
    double sum = 0.0;
    int64_t pairs = 0;
    for (size_t i = 0; i < samples.size(); ++i) {
        for (size_t j = i + 1; j < samples.size(); ++j) {
            if (samples[i].sizes() != samples[j].sizes()) throw std::invalid_argument("diversity_score: shape mismatch");
            const auto d = (samples[i].to(torch::kDouble) - samples[j].to(torch::kDouble));
            sum += std::sqrt(d.pow(2).mean().item<double>());
            ++pairs;
        }
    }
    return sum / static_cast<double>(pairs);
}

nlohmann::json EvalReport::to_json() const {
    auto classes = nlohmann::json::array();
    for (double v : per_class_iou) classes.push_back(std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v));
    return {{"toy_miou", toy_miou},
            {"diversity", diversity},
            {"per_class_iou", classes},
            {"num_samples", num_samples},
            {"config", config}};
}

std::string EvalReport::table(const std::vector<std::string>& class_names) const {
    std::ostringstream os;
    os << std::fixed << std::setprecision(4);
    os << "class            iou\n";
    for (size_t k = 0; k < per_class_iou.size(); ++k) {
        const auto name = k < class_names.size() ? class_names[k] : std::to_string(k);
        os << std::left << std::setw(14) << name << " ";
        if (std::isnan(per_class_iou[k])) {
            os << "   -\n";
        } else {
            os << per_class_iou[k] << "\n";
        }
    }
    os << "toy_miou       " << toy_miou << "\n";
    os << "diversity      " << diversity << "\n";
    os << "samples        " << num_samples << "\n";
    return os.str();
}

Dataset heldout_layouts(const SceneSpec& spec, const EvalSettings& settings) {
    return generate_dataset(spec, settings.num_layouts, settings.layout_seed);
}

EvalReport evaluate(const Denoiser& denoiser, const NoiseSchedule& schedule, const Dataset& layouts,
                    const EvalSettings& settings, int image_channels, const ProgressCallback& progress) {
    settings.sampler.validate();
    if (settings.seeds_per_layout < 1) throw std::invalid_argument("evaluate: seeds_per_layout must be positive");
    if (layouts.size() == 0) throw std::invalid_argument("evaluate: no layouts");
    const int k = settings.seeds_per_layout;
    const int per_batch = std::max(1, settings.batch_size / k);

    std::vector<torch::Tensor> images, labels;
    double diversity_sum = 0.0;
    const auto n = static_cast<int>(layouts.size());
    for (int start = 0; start < n; start += per_batch) {
        const int end = std::min(n, start + per_batch);
        std::vector<torch::Tensor> conds;
        std::vector<uint64_t> seeds;
        for (int i = start; i < end; ++i) {
            const auto cond = layouts.scenes[i].layout.condition();
            const auto s = sample_seeds(derive_seed(settings.sampler.seed, static_cast<uint64_t>(i)), k);
            for (int j = 0; j < k; ++j) conds.push_back(cond);
            seeds.insert(seeds.end(), s.begin(), s.end());
        }
        const auto out = sample_batch(denoiser, torch::stack(conds, 0), schedule, settings.sampler, seeds,
                                      image_channels);
        for (int i = start; i < end; ++i) {
            std::vector<torch::Tensor> group;
            for (int j = 0; j < k; ++j) {
                group.push_back(out[(i - start) * k + j]);
                images.push_back(group.back());
                labels.push_back(layouts.scenes[i].labels);
            }
            if (k >= 2) diversity_sum += diversity_score(group);
        }
        if (progress) progress(end, n);
    }

    EvalReport report;
    report.toy_miou = toy_miou(images, labels, layouts.spec.class_hues(), &report.per_class_iou);
    report.diversity = k >= 2 ? diversity_sum / n : 0.0;
    report.num_samples = static_cast<int>(images.size());
    report.config = {{"sampler", settings.sampler},
                     {"num_layouts", n},
                     {"seeds_per_layout", k},
                     {"layout_seed", settings.layout_seed}};
    return report;
}

std::vector<AblationVariant> standard_ablation(const std::filesystem::path& spade_checkpoint,
                                               const std::filesystem::path& concat_checkpoint) {
    return {{"concat, unguided", concat_checkpoint, false},
            {"spade, unguided", spade_checkpoint, false},
            {"spade, guided", spade_checkpoint, true}};
}

std::vector<AblationRow> run_ablation(const std::vector<AblationVariant>& variants, const EvalSettings& settings,
                                      const ProgressCallback& progress) {
    if (variants.empty()) throw std::invalid_argument("run_ablation: no variants");
    std::vector<AblationRow> rows;
    std::optional<SceneSpec> spec;
    for (const auto& v : variants) {
        const auto ckpt = load_checkpoint(v.checkpoint);
        if (spec && !(*spec == ckpt.scene_spec)) {
            throw std::invalid_argument("run_ablation: " + v.checkpoint.string() +
                                        " was trained on a different scene spec");
        }
        spec = ckpt.scene_spec;
        const auto net = load_ema_model(ckpt);
        auto s = settings;
        s.sampler.guidance.enabled = v.guidance;
        const auto layouts = heldout_layouts(ckpt.scene_spec, s);
        AblationRow row{v, to_string(ckpt.model_config.conditioning), {}};
        row.report = evaluate(make_network_denoiser(net), ckpt.diffusion.build(), layouts, s,
                              ckpt.model_config.image_channels, progress);
        rows.push_back(std::move(row));
    }
    return rows;
}

std::string format_ablation_table(const std::vector<AblationRow>& rows) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(4);
    os << std::left << std::setw(22) << "variant" << std::setw(10) << "decoder" << std::setw(10) << "guidance"
       << std::setw(10) << "toy_miou" << "diversity\n";
    for (const auto& r : rows) {
        std::ostringstream g;
        g << std::fixed << std::setprecision(2);
        if (r.variant.guidance) {
            g << r.report.config.at("sampler").at("guidance_scale").get<double>();
        } else {
            g << "off";
        }
        os << std::left << std::setw(22) << r.variant.name << std::setw(10) << r.conditioning << std::setw(10)
           << g.str() << std::setw(10) << r.report.toy_miou << r.report.diversity << "\n";
    }
    return os.str();
}

nlohmann::json ablation_to_json(const std::vector<AblationRow>& rows) {
    auto out = nlohmann::json::array();
    for (const auto& r : rows) {
        out.push_back({{"name", r.variant.name},
                       {"checkpoint", r.variant.checkpoint.string()},
                       {"guidance", r.variant.guidance},
                       {"conditioning", r.conditioning},
                       {"report", r.report.to_json()}});
    }
    return out;
}

}  // namespace sdm
