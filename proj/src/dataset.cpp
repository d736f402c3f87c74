#include "sdm/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "sdm/image_io.hpp"
#include "sdm/sampler.hpp"
#include "sdm/serialization.hpp"

namespace sdm {

namespace {

constexpr const char* kShapeNames[] = {"circle", "rectangle", "triangle"};

bool inside_triangle(double px, double py, double cx, double cy, double r) {
    // apex up, base down
    const double ax = cx, ay = cy - r;
    const double bx = cx - r, by = cy + r;
    const double qx = cx + r, qy = cy + r;
    auto cross = [](double x1, double y1, double x2, double y2, double x3, double y3) {
        return (x2 - x1) * (y3 - y1) - (y2 - y1) * (x3 - x1);
    };
    const double d1 = cross(ax, ay, bx, by, px, py);
    const double d2 = cross(bx, by, qx, qy, px, py);
    const double d3 = cross(qx, qy, ax, ay, px, py);
    const bool has_neg = d1 < 0 || d2 < 0 || d3 < 0;
    const bool has_pos = d1 > 0 || d2 > 0 || d3 > 0;
    return !(has_neg && has_pos);
}

std::string scene_stem(size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%06zu", index);
    return buf;
}

}  // namespace

std::vector<double> SceneSpec::class_hues() const {
    std::vector<double> hues(num_classes, -1.0);
    const int shapes = num_classes - 1;
    for (int k = 1; k < num_classes; ++k) hues[k] = 360.0 * (k - 1) / shapes;
    return hues;
}

std::vector<std::string> SceneSpec::class_names() const {
    std::vector<std::string> names{"background"};
    const auto hues = class_hues();
    for (int k = 1; k < num_classes; ++k) {
        names.push_back(std::string(kShapeNames[(k - 1) % 3]) + "@" +
                        std::to_string(static_cast<int>(std::lround(hues[k]))));
    }
    return names;
}

std::vector<std::array<uint8_t, 3>> SceneSpec::palette() const {
    std::vector<std::array<uint8_t, 3>> out;
    const auto hues = class_hues();
    for (int k = 0; k < num_classes; ++k) {
        const double v = k == 0 ? 0.5 * (background_min_value + background_max_value) : 0.5 * (min_value + max_value);
        const auto rgb = hsv_to_rgb(std::max(hues[k], 0.0), k == 0 ? 0.0 : saturation, v);
        out.push_back({static_cast<uint8_t>(std::lround(rgb[0] * 255)), static_cast<uint8_t>(std::lround(rgb[1] * 255)),
                       static_cast<uint8_t>(std::lround(rgb[2] * 255))});
    }
    return out;
}

void SceneSpec::validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("SceneSpec: " + m); };
    if (image_size < 1) fail("image_size must be positive");
    if (num_classes < 1 || num_classes > 256) fail("num_classes must be in 1..256");
    if (min_shapes < 0 || max_shapes < min_shapes) fail("need 0 <= min_shapes <= max_shapes");
    if (max_shapes > 0 && num_classes < 2) fail("shapes need at least one non-background class");
    if (!(0 < min_value && min_value <= max_value && max_value <= 1)) fail("value range must lie in (0, 1]");
    if (!(0 < saturation && saturation <= 1)) fail("saturation must lie in (0, 1]");
    if (!(0 <= background_min_value && background_min_value <= background_max_value && background_max_value <= 1)) {
        fail("background value range must lie in [0, 1]");
    }
    if (texture_amplitude < 0 || texture_amplitude >= 1) fail("texture_amplitude must lie in [0, 1)");
}

std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
    h = std::fmod(h, 360.0);
    if (h < 0) h += 360.0;
    const double c = v * s;
    const double hp = h / 60.0;
    const double x = c * (1.0 - std::fabs(std::fmod(hp, 2.0) - 1.0));
    double r = 0, g = 0, b = 0;
    switch (static_cast<int>(hp)) {
        case 0: r = c; g = x; break;
        case 1: r = x; g = c; break;
        case 2: g = c; b = x; break;
        case 3: g = x; b = c; break;
        case 4: r = x; b = c; break;
        default: r = c; b = x; break;
    }
    const double m = v - c;
    return {r + m, g + m, b + m};
}

std::array<double, 3> rgb_to_hsv(double r, double g, double b) {
    const double mx = std::max({r, g, b});
    const double mn = std::min({r, g, b});
    const double d = mx - mn;
    double h = 0.0;
    if (d > 0) {
        if (mx == r) {
            h = 60.0 * std::fmod((g - b) / d, 6.0);
        } else if (mx == g) {
            h = 60.0 * ((b - r) / d + 2.0);
        } else {
            h = 60.0 * ((r - g) / d + 4.0);
        }
        if (h < 0) h += 360.0;
    }
    const double s = mx > 0 ? d / mx : 0.0;
    return {h, s, mx};
}

Scene generate_scene(const SceneSpec& spec, uint64_t seed) {
    spec.validate();
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

    const int s = spec.image_size;
    const auto hues = spec.class_hues();
    std::vector<int64_t> labels(static_cast<size_t>(s) * s, 0);
    std::vector<int64_t> instances(labels.size(), 0);
    std::vector<std::array<double, 3>> colors(labels.size());

    const double bg = uniform(spec.background_min_value, spec.background_max_value);
    std::fill(colors.begin(), colors.end(), std::array<double, 3>{bg, bg, bg});

    const int count = spec.max_shapes == 0
                          ? 0
                          : std::uniform_int_distribution<int>(spec.min_shapes, spec.max_shapes)(rng);
    for (int k = 1; k <= count; ++k) {
        const int cls = std::uniform_int_distribution<int>(1, spec.num_classes - 1)(rng);
        const int shape = (cls - 1) % 3;
        const double cx = uniform(0.0, s);
        const double cy = uniform(0.0, s);
        const double r = uniform(0.15 * s, 0.32 * s);
        const double aspect = uniform(0.6, 1.0);
        const auto rgb = hsv_to_rgb(hues[cls], spec.saturation, uniform(spec.min_value, spec.max_value));
        for (int y = 0; y < s; ++y) {
            for (int x = 0; x < s; ++x) {
                const double px = x + 0.5, py = y + 0.5;
                bool in = false;
                switch (shape) {
                    case 0: in = (px - cx) * (px - cx) + (py - cy) * (py - cy) <= r * r; break;
                    case 1: in = std::fabs(px - cx) <= r && std::fabs(py - cy) <= r * aspect; break;
                    default: in = inside_triangle(px, py, cx, cy, r); break;
                }
                if (in) {
                    const size_t i = static_cast<size_t>(y) * s + x;
                    labels[i] = cls;
                    instances[i] = k;
                    colors[i] = rgb;
                }
            }
        }
    }

    std::vector<float> pixels(3 * labels.size());
    for (size_t i = 0; i < labels.size(); ++i) {
        // brightness-only texture keeps hue and saturation exact
        const double gain = spec.texture ? 1.0 + spec.texture_amplitude * uniform(-1.0, 1.0) : 1.0;
        for (int c = 0; c < 3; ++c) {
            const double value = std::clamp(colors[i][c] * gain, 0.0, 1.0);
            pixels[c * labels.size() + i] = static_cast<float>(2.0 * value - 1.0);
        }
    }

    Scene scene;
    scene.labels = torch::tensor(labels, torch::kInt64).view({s, s});
    scene.instances = torch::tensor(instances, torch::kInt64).view({s, s});
    scene.image = torch::tensor(pixels).view({3, s, s});
    scene.layout = make_layout(scene.labels, scene.instances, spec.num_classes, spec.use_edge_map);
    return scene;
}

torch::Tensor one_hot(const torch::Tensor& labels, int num_classes) {
    if (labels.dim() != 2) throw std::invalid_argument("one_hot: expected [H, W] labels");
    if (labels.numel() > 0) {
        const auto lo = labels.min().item<int64_t>();
        const auto hi = labels.max().item<int64_t>();
        if (lo < 0 || hi >= num_classes) {
            throw std::invalid_argument("one_hot: label " + std::to_string(lo < 0 ? lo : hi) + " outside [0, " +
                                        std::to_string(num_classes) + ")");
        }
    }
    return torch::one_hot(labels.to(torch::kInt64), num_classes).permute({2, 0, 1}).to(torch::kFloat32).contiguous();
}

torch::Tensor edge_map(const torch::Tensor& instances) {
    if (instances.dim() != 2) throw std::invalid_argument("edge_map: expected [H, W] instance ids");
    auto edge = torch::zeros(instances.sizes(), torch::kBool);
    using torch::indexing::None;
    using torch::indexing::Slice;
    const auto h = instances.size(0), w = instances.size(1);
    if (w > 1) {
        auto diff = instances.index({Slice(), Slice(1, None)}) != instances.index({Slice(), Slice(None, w - 1)});
        edge.index({Slice(), Slice(1, None)}) |= diff;
        edge.index({Slice(), Slice(None, w - 1)}) |= diff;
    }
    if (h > 1) {
        auto diff = instances.index({Slice(1, None), Slice()}) != instances.index({Slice(None, h - 1), Slice()});
        edge.index({Slice(1, None), Slice()}) |= diff;
        edge.index({Slice(None, h - 1), Slice()}) |= diff;
    }
    return edge.to(torch::kFloat32);
}

SemanticLayout make_layout(const torch::Tensor& labels, const torch::Tensor& instances, int num_classes,
                           bool use_edge_map) {
    SemanticLayout layout;
    layout.num_classes = num_classes;
    layout.onehot = one_hot(labels, num_classes);
    if (use_edge_map) {
        if (!instances.defined() || instances.sizes() != labels.sizes()) {
            throw std::invalid_argument("make_layout: instance map required for the edge channel");
        }
        layout.edge = edge_map(instances).unsqueeze(0);
    }
    return layout;
}

bool should_drop_label(double p, std::mt19937_64& rng) {
    if (p < 0.0 || p > 1.0) throw std::invalid_argument("drop_label: p must lie in [0, 1]");
    return std::uniform_real_distribution<double>(0.0, 1.0)(rng) < p;
}

SemanticLayout drop_label(const SemanticLayout& layout, double p, std::mt19937_64& rng) {
    if (!should_drop_label(p, rng)) return layout;
    return make_null_layout(layout.num_classes, layout.has_edge(), layout.height(), layout.width());
}

Dataset generate_dataset(const SceneSpec& spec, int count, uint64_t base_seed) {
    if (count < 0) throw std::invalid_argument("generate_dataset: negative count");
    Dataset ds;
    ds.spec = spec;
    ds.base_seed = base_seed;
    ds.scenes.reserve(count);
    for (int i = 0; i < count; ++i) ds.scenes.push_back(generate_scene(spec, derive_seed(base_seed, i)));
    return ds;
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    const auto palette = dataset.spec.palette();
    nlohmann::json manifest;
    manifest["format"] = "sdm-dataset/1";
    manifest["spec"] = dataset.spec;
    manifest["base_seed"] = dataset.base_seed;
    manifest["count"] = dataset.size();
    manifest["seed_range"] = {0, dataset.size()};
    manifest["class_names"] = dataset.spec.class_names();
    manifest["class_hues"] = dataset.spec.class_hues();
    manifest["palette"] = palette;
    for (size_t i = 0; i < dataset.size(); ++i) {
        const auto& scene = dataset.scenes[i];
        const auto stem = scene_stem(i);
        write_png(dir / (stem + "_image.png"), image_to_raster(scene.image));
        write_png(dir / (stem + "_label.png"), labels_to_raster(scene.labels, palette));
        write_png(dir / (stem + "_instance.png"), instances_to_raster(scene.instances));
    }
    std::ofstream out(dir / "manifest.json");
    if (!out) throw std::runtime_error("cannot write " + (dir / "manifest.json").string());
    out << manifest.dump(2) << "\n";
}

Dataset load_dataset(const std::filesystem::path& dir) {
    const auto manifest_path = dir / "manifest.json";
    std::ifstream in(manifest_path);
    if (!in) throw std::runtime_error("dataset manifest not found: " + manifest_path.string());
    nlohmann::json manifest;
    try {
        in >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error(manifest_path.string() + ": " + e.what());
    }
    Dataset ds;
    ds.spec = manifest.at("spec").get<SceneSpec>();
    ds.base_seed = manifest.at("base_seed").get<uint64_t>();
    const auto count = manifest.at("count").get<size_t>();
    ds.scenes.reserve(count);
    for (size_t i = 0; i < count; ++i) {
        const auto stem = scene_stem(i);
        Scene scene;
        scene.image = raster_to_image(read_png(dir / (stem + "_image.png")));
        scene.labels = raster_to_labels(read_png(dir / (stem + "_label.png")));
        scene.instances = raster_to_labels(read_png(dir / (stem + "_instance.png")));
        scene.layout = make_layout(scene.labels, scene.instances, ds.spec.num_classes, ds.spec.use_edge_map);
        ds.scenes.push_back(std::move(scene));
    }
    return ds;
}

}  // namespace sdm
