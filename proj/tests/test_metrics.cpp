#include "doctest_torch.hpp"

#include <cmath>

#include "sdm/metrics.hpp"
#include "support.hpp"

using namespace sdm;

namespace {

SceneSpec desk_scene() {
    SceneSpec s;
    s.image_size = 32;
    s.num_classes = 8;
    return s;
}

torch::Tensor solid(double r, double g, double b, int size = 4) {
    auto img = torch::empty({3, size, size});
    img[0].fill_(r * 2 - 1);
    img[1].fill_(g * 2 - 1);
    img[2].fill_(b * 2 - 1);
    return img;
}

}  // namespace

TEST_SUITE("metrics") {

TEST_CASE("hue segmentation of flat colors") {
    const auto spec = desk_scene();
    const auto hues = spec.class_hues();
    for (int k = 1; k < spec.num_classes; ++k) {
        const auto rgb = hsv_to_rgb(hues[k], 0.85, 0.8);
        CHECK(hue_segment(solid(rgb[0], rgb[1], rgb[2]), hues).eq(k).all().item<bool>());
    }
    CHECK(hue_segment(solid(0.45, 0.45, 0.45), hues).eq(0).all().item<bool>());
    CHECK(hue_segment(solid(0.0, 0.0, 0.0), hues).eq(0).all().item<bool>());
    // Between two class hues, the nearer one wins, across the 0/360 seam too.
    const auto near_last = hsv_to_rgb(hues.back() + 0.4 * (360 - hues.back()), 0.9, 0.8);
    CHECK(hue_segment(solid(near_last[0], near_last[1], near_last[2]), hues).eq(7).all().item<bool>());
    const auto near_first = hsv_to_rgb(hues.back() + 0.6 * (360 - hues.back()), 0.9, 0.8);
    CHECK(hue_segment(solid(near_first[0], near_first[1], near_first[2]), hues).eq(1).all().item<bool>());
    CHECK_THROWS(hue_segment(torch::zeros({4, 4}), hues));
}

TEST_CASE("ground-truth renders segment back to their layouts") {
    const auto spec = desk_scene();
    std::vector<torch::Tensor> images, labels;
    for (uint64_t seed = 0; seed < 100; ++seed) {
        const auto s = generate_scene(spec, derive_seed(123, seed));
        images.push_back(s.image);
        labels.push_back(s.labels);
    }
    std::vector<double> per_class;
    const double miou = toy_miou(images, labels, spec.class_hues(), &per_class);
    MESSAGE("ground-truth toy mIoU " << miou);
    CHECK(miou >= 0.95);
    CHECK(per_class.size() == 8);
}

TEST_CASE("noise images score at chance level") {
    const auto spec = desk_scene();
    torch::manual_seed(4);
    std::vector<torch::Tensor> images, labels;
    for (uint64_t seed = 0; seed < 50; ++seed) {
        images.push_back(torch::rand({3, 32, 32}) * 2 - 1);
        labels.push_back(generate_scene(spec, seed).labels);
    }
    const auto hues = spec.class_hues();
    const double miou = toy_miou(images, labels, hues);

    // Independent prediction and reference with class frequencies p and q
    // give IoU = pq / (p + q - pq) per class.
    std::vector<double> p(8, 0), q(8, 0);
    double n = 0;
    for (size_t i = 0; i < images.size(); ++i) {
        const auto pred = hue_segment(images[i], hues);
        for (int k = 0; k < 8; ++k) {
            p[k] += pred.eq(k).sum().item<double>();
            q[k] += labels[i].eq(k).sum().item<double>();
        }
        n += pred.numel();
    }
    double expected = 0;
    int present = 0;
    for (int k = 0; k < 8; ++k) {
        if (q[k] == 0) continue;
        const double pk = p[k] / n, qk = q[k] / n;
        expected += pk * qk / (pk + qk - pk * qk);
        ++present;
    }
    expected /= present;
    MESSAGE("noise mIoU " << miou << ", chance " << expected);
    CHECK(std::fabs(miou - expected) < 0.03);
    CHECK(miou < 0.3);
}

TEST_CASE("mismatched layouts score low") {
    const auto spec = desk_scene();
    std::vector<torch::Tensor> images, labels;
    for (uint64_t seed = 0; seed < 50; ++seed) {
        images.push_back(generate_scene(spec, seed).image);
        labels.push_back(generate_scene(spec, seed + 1000).labels);
    }
    CHECK(toy_miou(images, labels, spec.class_hues()) < 0.3);
}

TEST_CASE("confusion matrix") {
    ConfusionMatrix cm(3);
    const auto ref = torch::tensor({0, 0, 1, 1, 2}, torch::kInt64);
    const auto pred = torch::tensor({0, 1, 1, 1, 0}, torch::kInt64);
    cm.add(pred, ref);
    CHECK(cm.at(0, 1) == 1);
    CHECK(cm.iou(0) == doctest::Approx(1.0 / 3));
    CHECK(cm.iou(1) == doctest::Approx(2.0 / 3));
    CHECK(cm.iou(2) == 0.0);
    CHECK(cm.mean_iou() == doctest::Approx(1.0 / 3));

    ConfusionMatrix single(4);
    single.add(torch::full({5, 5}, 2, torch::kInt64), torch::full({5, 5}, 2, torch::kInt64));
    CHECK(single.mean_iou() == 1.0);
    CHECK(!single.present(0));
    CHECK(std::isnan(single.per_class_iou()[0]));

    // Renaming classes consistently leaves the score unchanged.
    const auto perm = torch::tensor({2, 0, 1}, torch::kInt64);
    ConfusionMatrix renamed(3);
    renamed.add(perm.index({pred}), perm.index({ref}));
    CHECK(renamed.mean_iou() == doctest::Approx(cm.mean_iou()));

    CHECK_THROWS(cm.add(pred, torch::zeros({4}, torch::kInt64)));
    CHECK_THROWS(cm.add(torch::full({5}, 3, torch::kInt64), ref));
    CHECK_THROWS(ConfusionMatrix(0));
}

TEST_CASE("diversity score") {
    const auto a = torch::zeros({3, 4, 4});
    CHECK(diversity_score({a, a, a}) == 0.0);
    CHECK(diversity_score({a, torch::ones({3, 4, 4})}) == doctest::Approx(1.0));
    // Pairs (0, 1): 1, (0, 2): 2, (1, 2): 1.
    CHECK(diversity_score({a, torch::ones({3, 4, 4}), torch::full({3, 4, 4}, 2.0)}) ==
          doctest::Approx(4.0 / 3));
    CHECK_THROWS(diversity_score({a}));
    CHECK_THROWS(diversity_score({a, torch::zeros({3, 2, 2})}));
}

TEST_CASE("evaluation of an oracle denoiser") {
    // A denoiser that knows nothing still runs end to end and yields a
    // well-formed report.
    auto spec = desk_scene();
    spec.image_size = 8;
    spec.num_classes = 3;
    EvalSettings settings;
    settings.num_layouts = 3;
    settings.seeds_per_layout = 2;
    settings.sampler.steps = 5;
    settings.sampler.guidance.enabled = false;
    const auto layouts = heldout_layouts(spec, settings);
    CHECK(layouts.size() == 3);
    int calls = 0;
    const auto report = evaluate(analytic_gaussian_denoiser(0.0, 0.5), default_linear_schedule(50), layouts,
                                 settings, 3, [&](int, int) { ++calls; });
    CHECK(report.num_samples == 6);
    CHECK(report.diversity > 0.0);
    CHECK(report.toy_miou >= 0.0);
    CHECK(report.toy_miou <= 1.0);
    CHECK(calls > 0);
    const auto j = report.to_json();
    CHECK(j.contains("toy_miou"));
    CHECK(j.contains("diversity"));
    CHECK(report.table(spec.class_names()).find("background") != std::string::npos);

    const auto again = evaluate(analytic_gaussian_denoiser(0.0, 0.5), default_linear_schedule(50), layouts, settings);
    CHECK(again.toy_miou == report.toy_miou);
    CHECK(again.diversity == report.diversity);
}

}  // TEST_SUITE
