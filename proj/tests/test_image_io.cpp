#include "doctest_torch.hpp"

#include "sdm/dataset.hpp"
#include "sdm/image_io.hpp"

using namespace sdm;

TEST_SUITE("image_io") {

TEST_CASE("base64 round trip") {
    for (size_t n : {0, 1, 2, 3, 4, 5, 100}) {
        std::vector<uint8_t> bytes(n);
        for (size_t i = 0; i < n; ++i) bytes[i] = static_cast<uint8_t>(i * 37 + 11);
        const auto text = base64_encode(bytes);
        CHECK(text.size() % 4 == 0);
        CHECK(base64_decode(text) == bytes);
        CHECK(base64_decode("data:image/png;base64," + text) == bytes);
    }
    CHECK(base64_encode({'M', 'a'}) == "TWE=");
    CHECK_THROWS(base64_decode("not base64!"));
}

TEST_CASE("RGB images round trip through PNG") {
    torch::manual_seed(1);
    const auto img = (torch::randint(0, 256, {3, 5, 7}).to(torch::kFloat32) / 255.0) * 2 - 1;
    const auto raster = decode_png(encode_png(image_to_raster(img)));
    CHECK(raster.channels == 3);
    CHECK(raster.width == 7);
    CHECK(raster.height == 5);
    CHECK((raster_to_image(raster) - img).abs().max().item<double>() < 1e-6);
    // Values outside [-1, 1] are clamped.
    const auto clipped = image_to_raster(torch::full({3, 1, 1}, 4.0));
    CHECK(clipped.data[0] == 255);
}

TEST_CASE("label, instance and mask rasters") {
    SceneSpec spec;
    spec.num_classes = 5;
    torch::manual_seed(2);
    const auto labels = torch::randint(0, 5, {6, 4}, torch::kInt64);
    const auto indexed = decode_png(encode_png(labels_to_raster(labels, spec.palette())));
    CHECK(indexed.indexed());
    CHECK(indexed.palette.size() == 5);
    CHECK(torch::equal(raster_to_labels(indexed), labels));

    const auto instances = torch::randint(0, 3000, {4, 4}, torch::kInt64);
    const auto gray16 = decode_png(encode_png(instances_to_raster(instances)));
    CHECK(gray16.bit_depth == 16);
    CHECK(torch::equal(raster_to_labels(gray16), instances));

    const auto mask = torch::randint(0, 2, {3, 3}, torch::kInt64);
    CHECK(torch::equal(raster_to_mask(decode_png(encode_png(mask_to_raster(mask)))).to(torch::kInt64), mask));
    CHECK_THROWS(decode_png({1, 2, 3}));
}

}  // TEST_SUITE
