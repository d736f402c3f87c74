#include "sdm/checkpoint.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>

#include "sdm/image_io.hpp"
#include "sdm/serialization.hpp"

namespace sdm {

namespace {

constexpr char kMagic[8] = {'S', 'D', 'M', 'C', 'K', 'P', 'T', '\0'};

uint32_t crc32_of(const uint8_t* data, size_t n) {
    uLong crc = crc32(0L, Z_NULL, 0);
    while (n > 0) {
        const auto chunk = static_cast<uInt>(std::min<size_t>(n, 1u << 30));
        crc = crc32(crc, data, chunk);
        data += chunk;
        n -= chunk;
    }
    return static_cast<uint32_t>(crc);
}

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<uint8_t>& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

uint32_t get_u32(const uint8_t* p) {
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(p[i]) << (8 * i);
    return v;
}

uint64_t get_u64(const uint8_t* p) {
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p[i]) << (8 * i);
    return v;
}

void put_f32(std::vector<uint8_t>& out, float f) {
    uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32(out, bits);
}

float get_f32(const uint8_t* p) {
    const uint32_t bits = get_u32(p);
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
}

void add_module_arrays(std::map<std::string, torch::Tensor>& arrays, const std::string& prefix,
                       const torch::nn::Module& module) {
    for (const auto& item : module.named_parameters(true)) arrays[prefix + item.key()] = item.value().detach();
}

void load_module_arrays(const std::map<std::string, torch::Tensor>& arrays, const std::string& prefix,
                        torch::nn::Module& module) {
    torch::NoGradGuard guard;
    for (auto& item : module.named_parameters(true)) {
        auto it = arrays.find(prefix + item.key());
        if (it == arrays.end()) throw CheckpointError("checkpoint is missing array '" + prefix + item.key() + "'");
        if (it->second.sizes() != item.value().sizes()) {
            throw CheckpointError("checkpoint array '" + prefix + item.key() + "' has the wrong shape");
        }
        item.value().copy_(it->second.to(item.value().dtype()));
    }
}

}  // namespace

std::vector<uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
    nlohmann::json manifest;
    manifest["model"] = ckpt.model_config;
    manifest["train"] = ckpt.train_config;
    manifest["diffusion"] = ckpt.diffusion;
    manifest["scene"] = ckpt.scene_spec;
    manifest["step"] = ckpt.step;
    manifest["optimizer_steps"] = ckpt.optimizer_steps;
    manifest["rng_seed"] = ckpt.rng_seed;

    std::vector<uint8_t> payload;
    auto table = nlohmann::json::array();
    for (const auto& [name, tensor] : ckpt.arrays) {
        const auto flat = tensor.detach().to(torch::kCPU, torch::kFloat32).contiguous().reshape({-1});
        const auto offset = payload.size();
        const float* data = flat.data_ptr<float>();
        for (int64_t i = 0; i < flat.numel(); ++i) put_f32(payload, data[i]);
        table.push_back({{"name", name},
                         {"shape", tensor.sizes().vec()},
                         {"offset", offset},
                         {"bytes", payload.size() - offset},
                         {"crc32", crc32_of(payload.data() + offset, payload.size() - offset)}});
    }
    manifest["arrays"] = std::move(table);
    const auto text = manifest.dump();

    std::vector<uint8_t> out(kMagic, kMagic + 8);
    put_u32(out, kCheckpointVersion);
    put_u64(out, text.size());
    out.insert(out.end(), text.begin(), text.end());
    out.insert(out.end(), payload.begin(), payload.end());
    put_u32(out, crc32_of(out.data(), out.size()));
    return out;
}

Checkpoint deserialize_checkpoint(const std::vector<uint8_t>& bytes) {
    constexpr size_t header = 8 + 4 + 8;
    if (bytes.size() < header + 4 || std::memcmp(bytes.data(), kMagic, 8) != 0) {
        throw CheckpointError("not a checkpoint file (bad magic)");
    }
    const auto version = get_u32(bytes.data() + 8);
    if (version != kCheckpointVersion) {
        throw CheckpointError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                              std::to_string(kCheckpointVersion) + ")");
    }
    const auto body = bytes.size() - 4;
    if (crc32_of(bytes.data(), body) != get_u32(bytes.data() + body)) {
        throw CheckpointError("checkpoint checksum mismatch (file is corrupt)");
    }
    const auto manifest_size = get_u64(bytes.data() + 12);
    if (manifest_size > body - header) throw CheckpointError("checkpoint manifest size exceeds file size");
    const auto* payload = bytes.data() + header + manifest_size;
    const size_t payload_size = body - header - manifest_size;

    Checkpoint ckpt;
    try {
        const auto manifest = nlohmann::json::parse(bytes.begin() + header, bytes.begin() + header + manifest_size);
        manifest.at("model").get_to(ckpt.model_config);
        manifest.at("train").get_to(ckpt.train_config);
        manifest.at("diffusion").get_to(ckpt.diffusion);
        manifest.at("scene").get_to(ckpt.scene_spec);
        manifest.at("step").get_to(ckpt.step);
        manifest.at("optimizer_steps").get_to(ckpt.optimizer_steps);
        manifest.at("rng_seed").get_to(ckpt.rng_seed);
        for (const auto& entry : manifest.at("arrays")) {
            const auto name = entry.at("name").get<std::string>();
            const auto shape = entry.at("shape").get<std::vector<int64_t>>();
            const auto offset = entry.at("offset").get<size_t>();
            const auto nbytes = entry.at("bytes").get<size_t>();
            int64_t numel = 1;
            for (auto d : shape) numel *= d;
            if (nbytes != static_cast<size_t>(numel) * 4 || offset > payload_size || nbytes > payload_size - offset) {
                throw CheckpointError("array '" + name + "' does not fit the payload");
            }
            if (crc32_of(payload + offset, nbytes) != entry.at("crc32").get<uint32_t>()) {
                throw CheckpointError("array '" + name + "' checksum mismatch");
            }
            auto t = torch::empty({numel}, torch::kFloat32);
            auto* dst = t.data_ptr<float>();
            for (int64_t i = 0; i < numel; ++i) dst[i] = get_f32(payload + offset + 4 * i);
            ckpt.arrays[name] = t.reshape(shape);
        }
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("malformed checkpoint manifest: ") + e.what());
    } catch (const std::invalid_argument& e) {
        throw CheckpointError(std::string("malformed checkpoint manifest: ") + e.what());
    }
    return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    const auto bytes = serialize_checkpoint(ckpt);
    auto tmp = path;
    tmp += ".tmp";
    write_file_bytes(tmp, bytes);
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw std::runtime_error("cannot write checkpoint " + path.string() + ": " + ec.message());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw std::runtime_error("checkpoint not found: " + path.string());
    try {
        return deserialize_checkpoint(read_file_bytes(path));
    } catch (const CheckpointError& e) {
        throw CheckpointError(path.string() + ": " + e.what());
    }
}

Checkpoint checkpoint_from_state(const TrainState& state) {
    Checkpoint ckpt;
    ckpt.model_config = state.model_config;
    ckpt.train_config = state.train_config;
    ckpt.diffusion = state.diffusion;
    ckpt.scene_spec = state.scene_spec;
    ckpt.step = state.step;
    ckpt.rng_seed = state.train_config.seed;
    add_module_arrays(ckpt.arrays, "model/", *state.model);
    add_module_arrays(ckpt.arrays, "ema/", *state.ema);
    if (state.optimizer) {
        ckpt.optimizer_steps = state.optimizer->step_count();
        const auto named = state.model->named_parameters(true);
        auto& m = state.optimizer->first_moments();
        auto& v = state.optimizer->second_moments();
        for (size_t i = 0; i < named.size(); ++i) {
            ckpt.arrays["adam_m/" + named[i].key()] = m[i].detach();
            ckpt.arrays["adam_v/" + named[i].key()] = v[i].detach();
        }
    }
    return ckpt;
}

TrainState state_from_checkpoint(const Checkpoint& ckpt) {
    auto train = ckpt.train_config;
    train.seed = ckpt.rng_seed;
    auto state = TrainState::create(ckpt.model_config, train, ckpt.diffusion, ckpt.scene_spec);
    load_module_arrays(ckpt.arrays, "model/", *state.model);
    load_module_arrays(ckpt.arrays, "ema/", *state.ema);
    const auto named = state.model->named_parameters(true);
    auto& m = state.optimizer->first_moments();
    auto& v = state.optimizer->second_moments();
    torch::NoGradGuard guard;
    for (size_t i = 0; i < named.size(); ++i) {
        auto mi = ckpt.arrays.find("adam_m/" + named[i].key());
        auto vi = ckpt.arrays.find("adam_v/" + named[i].key());
        if (mi == ckpt.arrays.end() || vi == ckpt.arrays.end()) {
            throw CheckpointError("checkpoint is missing optimizer moments for '" + named[i].key() + "'");
        }
        m[i].copy_(mi->second);
        v[i].copy_(vi->second);
    }
    state.optimizer->set_step_count(ckpt.optimizer_steps);
    state.step = ckpt.step;
    return state;
}

UNet load_ema_model(const Checkpoint& ckpt) {
    ckpt.model_config.validate();
    UNet net(ckpt.model_config);
    load_module_arrays(ckpt.arrays, "ema/", *net);
    net->eval();
    for (auto& p : net->parameters()) p.set_requires_grad(false);
    return net;
}

}  // namespace sdm
