#include "sdm/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

namespace sdm {

namespace pt = boost::property_tree;

namespace {

template <typename T>
T parse_value(const std::string& key, const std::string& text) {
    std::istringstream is(text);
    T v{};
    is >> v;
    if (is.fail() || !(is >> std::ws).eof()) throw ConfigError(key + ": cannot parse '" + text + "'");
    return v;
}

template <>
bool parse_value<bool>(const std::string& key, const std::string& text) {
    if (text == "true" || text == "1" || text == "yes" || text == "on") return true;
    if (text == "false" || text == "0" || text == "no" || text == "off") return false;
    throw ConfigError(key + ": expected a boolean, got '" + text + "'");
}

template <>
std::string parse_value<std::string>(const std::string&, const std::string& text) {
    return text;
}

template <>
std::vector<int> parse_value<std::vector<int>>(const std::string& key, const std::string& text) {
    std::vector<int> out;
    std::istringstream is(text);
    std::string item;
    while (std::getline(is, item, ',')) {
        const auto b = item.find_first_not_of(" \t");
        if (b == std::string::npos) continue;
        out.push_back(parse_value<int>(key, item.substr(b, item.find_last_not_of(" \t") - b + 1)));
    }
    return out;
}

template <typename T>
std::string show(const T& v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

std::string show(bool v) { return v ? "true" : "false"; }

std::string show(const std::vector<int>& v) {
    std::string s;
    for (size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
}

struct Field {
    std::string key;
    std::function<void(const std::string&)> set;
    std::function<std::string()> get;
};

template <typename T>
Field field(const std::string& key, T& ref) {
    return {key, [key, &ref](const std::string& s) { ref = parse_value<T>(key, s); }, [&ref] { return show(ref); }};
}

std::vector<Field> fields(AppConfig& c) {
    auto& m = c.model;
    auto& t = c.train;
    auto& s = c.sample;
    auto& d = c.data;
    return {
        field("model.image_size", m.image_size),
        field("model.image_channels", m.image_channels),
        field("model.num_classes", m.num_classes),
        field("model.base_channels", m.base_channels),
        field("model.channel_multipliers", m.channel_multipliers),
        field("model.num_res_blocks", m.num_res_blocks),
        field("model.attention_resolutions", m.attention_resolutions),
        field("model.head_channels", m.head_channels),
        field("model.spade_hidden_channels", m.spade_hidden_channels),
        field("model.use_edge_map", m.use_edge_map),
        {"model.conditioning", [&m](const std::string& v) {
             try {
                 m.conditioning = conditioning_from_string(v);
             } catch (const std::exception& e) {
                 throw ConfigError(std::string("model.conditioning: ") + e.what());
             }
         },
         [&m] { return to_string(m.conditioning); }},
        field("model.diffusion_steps", c.diffusion.num_steps),
        field("model.beta_start", c.diffusion.beta_start),
        field("model.beta_end", c.diffusion.beta_end),
        field("loss.lambda_vlb", t.lambda_vlb),
        field("train.batch_size", t.batch_size),
        field("train.total_steps", t.total_steps),
        field("train.learning_rate", t.learning_rate),
        field("train.weight_decay", t.weight_decay),
        field("train.ema_decay", t.ema_decay),
        field("train.ema_warmup", t.ema_warmup),
        field("train.dropout_prob", t.dropout_prob),
        {"train.dropout_phase", [&t](const std::string& v) {
             try {
                 t.dropout_phase = dropout_phase_from_string(v);
             } catch (const std::exception& e) {
                 throw ConfigError(std::string("train.dropout_phase: ") + e.what());
             }
         },
         [&t] { return to_string(t.dropout_phase); }},
        field("train.finetune_start_step", t.finetune_start_step),
        field("train.grad_clip", t.grad_clip),
        field("train.seed", t.seed),
        field("train.checkpoint_every", t.checkpoint_every),
        field("train.log_every", t.log_every),
        field("sample.steps", s.steps),
        field("sample.guidance_scale", s.guidance.scale),
        field("sample.guidance", s.guidance.enabled),
        field("sample.clamp_y0", s.clamp_y0),
        field("sample.seed", s.seed),
        field("sample.num_samples", s.num_samples),
        field("data.count", d.count),
        field("data.seed", d.seed),
        field("data.min_shapes", d.scene.min_shapes),
        field("data.max_shapes", d.scene.max_shapes),
        field("data.min_value", d.scene.min_value),
        field("data.max_value", d.scene.max_value),
        field("data.saturation", d.scene.saturation),
        field("data.background_min_value", d.scene.background_min_value),
        field("data.background_max_value", d.scene.background_max_value),
        field("data.texture", d.scene.texture),
        field("data.texture_amplitude", d.scene.texture_amplitude),
        field("serve.host", c.serve.host),
        field("serve.port", c.serve.port),
        field("serve.workers", c.serve.workers),
        field("serve.queue_capacity", c.serve.queue_capacity),
    };
}

// The scene geometry always follows the model.
void sync(AppConfig& c) {
    c.data.scene.image_size = c.model.image_size;
    c.data.scene.num_classes = c.model.num_classes;
    c.data.scene.use_edge_map = c.model.use_edge_map;
}

}  // namespace

AppConfig desk_preset() {
    AppConfig c;
    sync(c);
    return c;
}

AppConfig cpu16_preset() {
    AppConfig c;
    c.model.image_size = 16;
    c.model.base_channels = 32;
    c.model.channel_multipliers = {1, 2, 2};
    c.model.attention_resolutions = {4};
    c.model.spade_hidden_channels = 32;
    c.train.total_steps = 20000;
    c.train.learning_rate = 2e-4;
    c.train.ema_decay = 0.999;
    c.train.checkpoint_every = 500;
    c.sample.steps = 250;
    sync(c);
    return c;
}

AppConfig preset(const std::string& name) {
    if (name == "desk") return desk_preset();
    if (name == "cpu16") return cpu16_preset();
    throw ConfigError("unknown preset '" + name + "' (expected desk or cpu16)");
}

AppConfig parse_config(const std::string& text, const std::string& origin) {
    pt::ptree tree;
    try {
        std::istringstream is(text);
        pt::read_ini(is, tree);
    } catch (const pt::ini_parser_error& e) {
        throw ConfigError(origin + ": " + e.message() + " (line " + std::to_string(e.line()) + ")");
    }

    AppConfig c = desk_preset();
    if (auto p = tree.get_optional<std::string>("preset")) c = preset(*p);

    auto table = fields(c);
    for (const auto& [section, node] : tree) {
        if (node.empty() && !node.data().empty()) {
            if (section != "preset") throw ConfigError(origin + ": unknown top-level key '" + section + "'");
            continue;
        }
        for (const auto& [key, value] : node) {
            const auto dotted = section + "." + key;
            auto it = std::find_if(table.begin(), table.end(), [&](const Field& f) { return f.key == dotted; });
            if (it == table.end()) throw ConfigError(origin + ": unknown key '" + dotted + "'");
            try {
                it->set(value.get_value<std::string>());
            } catch (const ConfigError& e) {
                throw ConfigError(origin + ": " + e.what());
            }
        }
    }
    sync(c);
    try {
        c.model.validate();
        c.train.validate();
        c.sample.validate();
        c.data.scene.validate();
        c.diffusion.build();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(origin + ": " + e.what());
    }
    return c;
}

AppConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str(), path.string());
}

std::string format_config(const AppConfig& config) {
    AppConfig copy = config;
    std::ostringstream os;
    std::string section;
    for (const auto& f : fields(copy)) {
        const auto dot = f.key.find('.');
        const auto sec = f.key.substr(0, dot);
        if (sec != section) {
            os << (section.empty() ? "" : "\n") << "[" << sec << "]\n";
            section = sec;
        }
        os << f.key.substr(dot + 1) << " = " << f.get() << "\n";
    }
    return os.str();
}

std::optional<std::filesystem::path> resolve_config_path(const std::optional<std::string>& flag) {
    if (flag && !flag->empty()) return std::filesystem::path(*flag);
    if (const char* env = std::getenv("SDM_CONFIG"); env && *env) return std::filesystem::path(env);
    return std::nullopt;
}

}  // namespace sdm
