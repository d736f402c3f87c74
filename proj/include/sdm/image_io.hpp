#pragma once

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace sdm {

// Raw 8/16-bit raster in row-major, channel-interleaved order.
struct Raster {
    int width = 0;
    int height = 0;
    int channels = 0;  // 1 or 3
    int bit_depth = 8;  // 8 or 16
    std::vector<uint16_t> data;
    // Palette entries of an indexed PNG; empty for gray/RGB.
    std::vector<std::array<uint8_t, 3>> palette;

    bool indexed() const { return !palette.empty(); }
};

std::vector<uint8_t> encode_png(const Raster& raster);
Raster decode_png(const std::vector<uint8_t>& bytes);

void write_png(const std::filesystem::path& path, const Raster& raster);
Raster read_png(const std::filesystem::path& path);

std::vector<uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::vector<uint8_t>& bytes);

// [3, H, W] image in [-1, 1] <-> 8-bit RGB raster (round to nearest, clamp).
Raster image_to_raster(const torch::Tensor& image);
torch::Tensor raster_to_image(const Raster& raster);

// Class-id map [H, W] <-> palette-indexed raster (palette index = class id).
Raster labels_to_raster(const torch::Tensor& labels, const std::vector<std::array<uint8_t, 3>>& palette);
torch::Tensor raster_to_labels(const Raster& raster);

// Instance-id map [H, W] <-> 16-bit grayscale raster.
Raster instances_to_raster(const torch::Tensor& instances);

// Binary mask [H, W] (nonzero = 1) <-> 8-bit grayscale raster with 0/255.
Raster mask_to_raster(const torch::Tensor& mask);
torch::Tensor raster_to_mask(const Raster& raster);

std::string base64_encode(const std::vector<uint8_t>& bytes);
std::vector<uint8_t> base64_decode(const std::string& text);

}  // namespace sdm
