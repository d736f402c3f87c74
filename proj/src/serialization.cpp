#include "sdm/serialization.hpp"

namespace sdm {

using nlohmann::json;

void to_json(json& j, const ModelConfig& c) {
    j = json{{"image_size", c.image_size},
             {"image_channels", c.image_channels},
             {"num_classes", c.num_classes},
             {"base_channels", c.base_channels},
             {"channel_multipliers", c.channel_multipliers},
             {"num_res_blocks", c.num_res_blocks},
             {"attention_resolutions", c.attention_resolutions},
             {"head_channels", c.head_channels},
             {"spade_hidden_channels", c.spade_hidden_channels},
             {"use_edge_map", c.use_edge_map},
             {"conditioning", to_string(c.conditioning)}};
}

void from_json(const json& j, ModelConfig& c) {
    j.at("image_size").get_to(c.image_size);
    j.at("image_channels").get_to(c.image_channels);
    j.at("num_classes").get_to(c.num_classes);
    j.at("base_channels").get_to(c.base_channels);
    j.at("channel_multipliers").get_to(c.channel_multipliers);
    j.at("num_res_blocks").get_to(c.num_res_blocks);
    j.at("attention_resolutions").get_to(c.attention_resolutions);
    j.at("head_channels").get_to(c.head_channels);
    j.at("spade_hidden_channels").get_to(c.spade_hidden_channels);
    j.at("use_edge_map").get_to(c.use_edge_map);
    c.conditioning = conditioning_from_string(j.at("conditioning").get<std::string>());
}

void to_json(json& j, const SceneSpec& s) {
    j = json{{"image_size", s.image_size},
             {"num_classes", s.num_classes},
             {"min_shapes", s.min_shapes},
             {"max_shapes", s.max_shapes},
             {"min_value", s.min_value},
             {"max_value", s.max_value},
             {"saturation", s.saturation},
             {"background_min_value", s.background_min_value},
             {"background_max_value", s.background_max_value},
             {"texture", s.texture},
             {"texture_amplitude", s.texture_amplitude},
             {"use_edge_map", s.use_edge_map}};
}

void from_json(const json& j, SceneSpec& s) {
    j.at("image_size").get_to(s.image_size);
    j.at("num_classes").get_to(s.num_classes);
    j.at("min_shapes").get_to(s.min_shapes);
    j.at("max_shapes").get_to(s.max_shapes);
    j.at("min_value").get_to(s.min_value);
    j.at("max_value").get_to(s.max_value);
    j.at("saturation").get_to(s.saturation);
    j.at("background_min_value").get_to(s.background_min_value);
    j.at("background_max_value").get_to(s.background_max_value);
    j.at("texture").get_to(s.texture);
    j.at("texture_amplitude").get_to(s.texture_amplitude);
    j.at("use_edge_map").get_to(s.use_edge_map);
}

void to_json(json& j, const TrainConfig& c) {
    j = json{{"batch_size", c.batch_size},
             {"total_steps", c.total_steps},
             {"learning_rate", c.learning_rate},
             {"weight_decay", c.weight_decay},
             {"lambda_vlb", c.lambda_vlb},
             {"ema_decay", c.ema_decay},
             {"ema_warmup", c.ema_warmup},
             {"dropout_prob", c.dropout_prob},
             {"dropout_phase", to_string(c.dropout_phase)},
             {"finetune_start_step", c.finetune_start_step},
             {"grad_clip", c.grad_clip},
             {"seed", c.seed},
             {"checkpoint_every", c.checkpoint_every},
             {"log_every", c.log_every}};
}

void from_json(const json& j, TrainConfig& c) {
    j.at("batch_size").get_to(c.batch_size);
    j.at("total_steps").get_to(c.total_steps);
    j.at("learning_rate").get_to(c.learning_rate);
    j.at("weight_decay").get_to(c.weight_decay);
    j.at("lambda_vlb").get_to(c.lambda_vlb);
    j.at("ema_decay").get_to(c.ema_decay);
    j.at("ema_warmup").get_to(c.ema_warmup);
    j.at("dropout_prob").get_to(c.dropout_prob);
    c.dropout_phase = dropout_phase_from_string(j.at("dropout_phase").get<std::string>());
    j.at("finetune_start_step").get_to(c.finetune_start_step);
    j.at("grad_clip").get_to(c.grad_clip);
    j.at("seed").get_to(c.seed);
    j.at("checkpoint_every").get_to(c.checkpoint_every);
    j.at("log_every").get_to(c.log_every);
}

void to_json(json& j, const DiffusionConfig& c) {
    j = json{{"num_steps", c.num_steps}, {"beta_start", c.beta_start}, {"beta_end", c.beta_end}};
}

void from_json(const json& j, DiffusionConfig& c) {
    j.at("num_steps").get_to(c.num_steps);
    j.at("beta_start").get_to(c.beta_start);
    j.at("beta_end").get_to(c.beta_end);
}

void to_json(json& j, const SamplerConfig& c) {
    j = json{{"steps", c.steps},
             {"guidance_scale", c.guidance.scale},
             {"guidance_enabled", c.guidance.enabled},
             {"clamp_y0", c.clamp_y0},
             {"seed", c.seed},
             {"num_samples", c.num_samples}};
}

void from_json(const json& j, SamplerConfig& c) {
    j.at("steps").get_to(c.steps);
    j.at("guidance_scale").get_to(c.guidance.scale);
    j.at("guidance_enabled").get_to(c.guidance.enabled);
    j.at("clamp_y0").get_to(c.clamp_y0);
    j.at("seed").get_to(c.seed);
    j.at("num_samples").get_to(c.num_samples);
}

}  // namespace sdm
