#include "sdm/image_io.hpp"

#include <png.h>

#include <boost/beast/core/detail/base64.hpp>

#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string_view>

namespace sdm {

namespace {

struct WriteState {
    std::vector<uint8_t>* out;
};

void write_callback(png_structp png, png_bytep data, png_size_t length) {
    auto* state = static_cast<WriteState*>(png_get_io_ptr(png));
    state->out->insert(state->out->end(), data, data + length);
}

void flush_callback(png_structp) {}

struct ReadState {
    const std::vector<uint8_t>* in;
    size_t offset;
};

void read_callback(png_structp png, png_bytep data, png_size_t length) {
    auto* state = static_cast<ReadState*>(png_get_io_ptr(png));
    if (state->offset + length > state->in->size()) {
        png_error(png, "truncated PNG stream");
    }
    std::memcpy(data, state->in->data() + state->offset, length);
    state->offset += length;
}

[[noreturn]] void error_callback(png_structp, png_const_charp message) {
    throw std::runtime_error(std::string("PNG: ") + message);
}

void warning_callback(png_structp, png_const_charp) {}

}  // namespace

std::vector<uint8_t> encode_png(const Raster& raster) {
    if (raster.width <= 0 || raster.height <= 0) throw std::invalid_argument("encode_png: empty raster");
    if (raster.channels != 1 && raster.channels != 3) throw std::invalid_argument("encode_png: 1 or 3 channels");
    if (raster.bit_depth != 8 && raster.bit_depth != 16) throw std::invalid_argument("encode_png: 8 or 16 bits");
    if (raster.indexed() && (raster.channels != 1 || raster.bit_depth != 8)) {
        throw std::invalid_argument("encode_png: indexed rasters are single-channel 8-bit");
    }
    const size_t expected = static_cast<size_t>(raster.width) * raster.height * raster.channels;
    if (raster.data.size() != expected) throw std::invalid_argument("encode_png: data size mismatch");

    std::vector<uint8_t> out;
    WriteState state{&out};
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, error_callback, warning_callback);
    png_infop info = png_create_info_struct(png);
    try {
        png_set_write_fn(png, &state, write_callback, flush_callback);
        int color_type = raster.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY;
        if (raster.indexed()) color_type = PNG_COLOR_TYPE_PALETTE;
        png_set_IHDR(png, info, raster.width, raster.height, raster.bit_depth, color_type, PNG_INTERLACE_NONE,
                     PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
        std::vector<png_color> palette;
        if (raster.indexed()) {
            for (const auto& c : raster.palette) palette.push_back(png_color{c[0], c[1], c[2]});
            png_set_PLTE(png, info, palette.data(), static_cast<int>(palette.size()));
        }
        png_write_info(png, info);

        const size_t row_samples = static_cast<size_t>(raster.width) * raster.channels;
        const size_t bytes_per_sample = raster.bit_depth / 8;
        std::vector<uint8_t> row(row_samples * bytes_per_sample);
        for (int y = 0; y < raster.height; ++y) {
            const uint16_t* src = raster.data.data() + y * row_samples;
            for (size_t i = 0; i < row_samples; ++i) {
                if (bytes_per_sample == 2) {
                    row[2 * i] = static_cast<uint8_t>(src[i] >> 8);  // PNG is big-endian
                    row[2 * i + 1] = static_cast<uint8_t>(src[i] & 0xFF);
                } else {
                    row[i] = static_cast<uint8_t>(src[i]);
                }
            }
            png_write_row(png, row.data());
        }
        png_write_end(png, nullptr);
    } catch (...) {
        png_destroy_write_struct(&png, &info);
        throw;
    }
    png_destroy_write_struct(&png, &info);
    return out;
}

Raster decode_png(const std::vector<uint8_t>& bytes) {
    if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0) {
        throw std::runtime_error("PNG: not a PNG stream");
    }
    ReadState state{&bytes, 0};
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, error_callback, warning_callback);
    png_infop info = png_create_info_struct(png);
    Raster raster;
    try {
        png_set_read_fn(png, &state, read_callback);
        png_read_info(png, info);
        png_uint_32 width = 0, height = 0;
        int bit_depth = 0, color_type = 0;
        png_get_IHDR(png, info, &width, &height, &bit_depth, &color_type, nullptr, nullptr, nullptr);

        if (color_type == PNG_COLOR_TYPE_PALETTE) {
            png_colorp palette = nullptr;
            int count = 0;
            png_get_PLTE(png, info, &palette, &count);
            for (int i = 0; i < count; ++i) raster.palette.push_back({palette[i].red, palette[i].green, palette[i].blue});
            if (bit_depth < 8) png_set_packing(png);
            raster.channels = 1;
            raster.bit_depth = 8;
        } else {
            if (color_type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
            if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
            raster.channels = (color_type & PNG_COLOR_MASK_COLOR) ? 3 : 1;
            raster.bit_depth = bit_depth == 16 ? 16 : 8;
        }
        png_read_update_info(png, info);
        raster.width = static_cast<int>(width);
        raster.height = static_cast<int>(height);

        const size_t row_bytes = png_get_rowbytes(png, info);
        std::vector<uint8_t> row(row_bytes);
        const size_t row_samples = static_cast<size_t>(raster.width) * raster.channels;
        raster.data.resize(row_samples * raster.height);
        for (int y = 0; y < raster.height; ++y) {
            png_read_row(png, row.data(), nullptr);
            uint16_t* dst = raster.data.data() + y * row_samples;
            for (size_t i = 0; i < row_samples; ++i) {
                dst[i] = raster.bit_depth == 16 ? static_cast<uint16_t>((row[2 * i] << 8) | row[2 * i + 1])
                                                : row[i];
            }
        }
        png_read_end(png, nullptr);
    } catch (...) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw;
    }
    png_destroy_read_struct(&png, &info, nullptr);
    return raster;
}

std::vector<uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    return std::vector<uint8_t>((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void write_file_bytes(const std::filesystem::path& path, const std::vector<uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed for " + path.string());
}

void write_png(const std::filesystem::path& path, const Raster& raster) {
    write_file_bytes(path, encode_png(raster));
}

Raster read_png(const std::filesystem::path& path) {
    try {
        return decode_png(read_file_bytes(path));
    } catch (const std::runtime_error& e) {
        throw std::runtime_error(path.string() + ": " + e.what());
    }
}

Raster image_to_raster(const torch::Tensor& image) {
    if (image.dim() != 3 || image.size(0) != 3) throw std::invalid_argument("image_to_raster: expected [3, H, W]");
    auto quantized = ((image.to(torch::kFloat64) + 1.0) * 127.5).round().clamp(0, 255).to(torch::kInt32)
                         .permute({1, 2, 0}).contiguous();
    Raster r;
    r.height = static_cast<int>(image.size(1));
    r.width = static_cast<int>(image.size(2));
    r.channels = 3;
    auto ptr = quantized.data_ptr<int32_t>();
    r.data.assign(ptr, ptr + quantized.numel());
    return r;
}

torch::Tensor raster_to_image(const Raster& raster) {
    if (raster.channels != 3 || raster.bit_depth != 8 || raster.indexed()) {
        throw std::invalid_argument("raster_to_image: expected 8-bit RGB");
    }
    std::vector<float> values(raster.data.size());
    for (size_t i = 0; i < values.size(); ++i) values[i] = static_cast<float>(raster.data[i]) / 127.5f - 1.0f;
    return torch::tensor(values).view({raster.height, raster.width, 3}).permute({2, 0, 1}).contiguous();
}

Raster labels_to_raster(const torch::Tensor& labels, const std::vector<std::array<uint8_t, 3>>& palette) {
    if (labels.dim() != 2) throw std::invalid_argument("labels_to_raster: expected [H, W]");
    if (palette.empty() || palette.size() > 256) throw std::invalid_argument("labels_to_raster: palette size");
    auto flat = labels.to(torch::kInt64).contiguous();
    Raster r;
    r.height = static_cast<int>(labels.size(0));
    r.width = static_cast<int>(labels.size(1));
    r.channels = 1;
    r.palette = palette;
    auto ptr = flat.data_ptr<int64_t>();
    r.data.resize(flat.numel());
    for (int64_t i = 0; i < flat.numel(); ++i) {
        if (ptr[i] < 0 || ptr[i] >= static_cast<int64_t>(palette.size())) {
            throw std::invalid_argument("labels_to_raster: class id " + std::to_string(ptr[i]) + " outside palette");
        }
        r.data[i] = static_cast<uint16_t>(ptr[i]);
    }
    return r;
}

torch::Tensor raster_to_labels(const Raster& raster) {
    if (raster.channels != 1) throw std::invalid_argument("raster_to_labels: expected a single-channel PNG");
    std::vector<int64_t> values(raster.data.begin(), raster.data.end());
    return torch::tensor(values, torch::kInt64).view({raster.height, raster.width});
}

Raster instances_to_raster(const torch::Tensor& instances) {
    if (instances.dim() != 2) throw std::invalid_argument("instances_to_raster: expected [H, W]");
    auto flat = instances.to(torch::kInt64).contiguous();
    Raster r;
    r.height = static_cast<int>(instances.size(0));
    r.width = static_cast<int>(instances.size(1));
    r.channels = 1;
    r.bit_depth = 16;
    auto ptr = flat.data_ptr<int64_t>();
    r.data.resize(flat.numel());
    for (int64_t i = 0; i < flat.numel(); ++i) {
        if (ptr[i] < 0 || ptr[i] > 65535) throw std::invalid_argument("instances_to_raster: id out of 16-bit range");
        r.data[i] = static_cast<uint16_t>(ptr[i]);
    }
    return r;
}

Raster mask_to_raster(const torch::Tensor& mask) {
    if (mask.dim() != 2) throw std::invalid_argument("mask_to_raster: expected [H, W]");
    auto flat = (mask != 0).to(torch::kInt32).contiguous();
    Raster r;
    r.height = static_cast<int>(mask.size(0));
    r.width = static_cast<int>(mask.size(1));
    r.channels = 1;
    auto ptr = flat.data_ptr<int32_t>();
    r.data.resize(flat.numel());
    for (int64_t i = 0; i < flat.numel(); ++i) r.data[i] = ptr[i] ? 255 : 0;
    return r;
}

torch::Tensor raster_to_mask(const Raster& raster) {
    if (raster.channels != 1) throw std::invalid_argument("raster_to_mask: expected a single-channel PNG");
    std::vector<float> values(raster.data.size());
    for (size_t i = 0; i < values.size(); ++i) values[i] = raster.data[i] != 0 ? 1.0f : 0.0f;
    return torch::tensor(values).view({raster.height, raster.width});
}

std::string base64_encode(const std::vector<uint8_t>& bytes) {
    namespace b64 = boost::beast::detail::base64;
    std::string out(b64::encoded_size(bytes.size()), '\0');
    out.resize(b64::encode(out.data(), bytes.data(), bytes.size()));
    return out;
}

std::vector<uint8_t> base64_decode(const std::string& text) {
    namespace b64 = boost::beast::detail::base64;
    std::string_view body(text);
    // Accept data URLs as sent by browsers.
    if (body.starts_with("data:")) {
        const auto comma = body.find(',');
        if (comma == std::string_view::npos) throw std::invalid_argument("invalid base64 payload");
        body.remove_prefix(comma + 1);
    }
    while (!body.empty() && (body.back() == '=' || std::isspace(static_cast<unsigned char>(body.back())))) {
        body.remove_suffix(1);
    }
    std::vector<uint8_t> out(b64::decoded_size(body.size()) + 3);
    auto [written, consumed] = b64::decode(out.data(), body.data(), body.size());
    if (consumed != body.size()) throw std::invalid_argument("invalid base64 payload");
    out.resize(written);
    return out;
}

}  // namespace sdm
