#include "sdm/inference.hpp"

#include <stdexcept>

#include "sdm/image_io.hpp"

namespace sdm {

InferenceModel InferenceModel::from_checkpoint(const Checkpoint& ckpt) {
    return {ckpt.model_config, ckpt.scene_spec, ckpt.diffusion.build(), make_network_denoiser(load_ema_model(ckpt))};
}

torch::Tensor resize_nearest(const torch::Tensor& map, int64_t size) {
    if (map.dim() != 2) throw std::invalid_argument("resize_nearest: expected an [H, W] map");
    const auto h = map.size(0), w = map.size(1);
    if (h == size && w == size) return map;
    const auto rows = torch::floor(torch::arange(size, torch::kDouble) * (double(h) / size)).to(torch::kInt64);
    const auto cols = torch::floor(torch::arange(size, torch::kDouble) * (double(w) / size)).to(torch::kInt64);
    return map.index_select(0, rows).index_select(1, cols);
}

SemanticLayout layout_from_labels(const torch::Tensor& labels, const ModelConfig& config) {
    if (labels.dim() != 2 || labels.size(0) != config.image_size || labels.size(1) != config.image_size) {
        throw std::invalid_argument("layout must be " + std::to_string(config.image_size) + "x" +
                                    std::to_string(config.image_size));
    }
    return make_layout(labels, labels, config.num_classes, config.use_edge_map);
}

std::vector<Png> generate_pngs(const InferenceModel& model, const torch::Tensor& labels, const SamplerConfig& config,
                               const ProgressCallback& progress) {
    const auto layout = layout_from_labels(labels, model.config);
    const auto images = sample(model.denoiser, layout, model.schedule, config, model.config.image_channels, progress);
    std::vector<Png> out;
    for (const auto& img : images) out.push_back(encode_png(image_to_raster(img)));
    return out;
}

std::vector<Png> edit_pngs(const InferenceModel& model, const torch::Tensor& source, const torch::Tensor& labels,
                           const torch::Tensor& mask, const SamplerConfig& config, const ProgressCallback& progress) {
    EditRequest req{source, layout_from_labels(labels, model.config), mask, config};
    const auto images = edit_inpaint(model.denoiser, req, model.schedule, progress);
    std::vector<Png> out;
    for (const auto& img : images) out.push_back(encode_png(image_to_raster(img)));
    return out;
}

}  // namespace sdm
