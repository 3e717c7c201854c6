// SPDX-License-Identifier: Apache-2.0
#include "ccm/config.hpp"

#include "ccm/diffusion.hpp"
#include "ccm/error.hpp"

using nlohmann::json;

namespace ccm {

namespace {

template <typename T> void maybe(const json& j, const char* key, T& out) {
    if (j.contains(key))
        out = j.at(key).get<T>();
}

} // namespace

json encoder_config_to_json(const EncoderConfig& c) {
    return json{{"image_size", c.image_size},
                {"latent_factor", c.latent_factor},
                {"fg_size", c.fg_size},
                {"patch_size", c.patch_size},
                {"vit_depth", c.vit_depth},
                {"vit_width", c.vit_width},
                {"deep_layer_index", c.deep_layer_index},
                {"shallow_layer_index", c.shallow_layer_index},
                {"mlp_layers", c.mlp_layers},
                {"vit_heads", c.vit_heads},
                {"d_g", c.d_g},
                {"d_l", c.d_l},
                {"ae_channels", c.ae_channels},
                {"use_pos_embed", c.use_pos_embed},
                {"fg_encoder_trainable", c.fg_encoder_trainable}};
}

EncoderConfig encoder_config_from_json(const json& j) {
    EncoderConfig c;
    maybe(j, "image_size", c.image_size);
    maybe(j, "latent_factor", c.latent_factor);
    maybe(j, "fg_size", c.fg_size);
    maybe(j, "patch_size", c.patch_size);
    maybe(j, "vit_depth", c.vit_depth);
    maybe(j, "vit_width", c.vit_width);
    maybe(j, "deep_layer_index", c.deep_layer_index);
    maybe(j, "shallow_layer_index", c.shallow_layer_index);
    maybe(j, "mlp_layers", c.mlp_layers);
    maybe(j, "vit_heads", c.vit_heads);
    maybe(j, "d_g", c.d_g);
    maybe(j, "d_l", c.d_l);
    maybe(j, "ae_channels", c.ae_channels);
    maybe(j, "use_pos_embed", c.use_pos_embed);
    maybe(j, "fg_encoder_trainable", c.fg_encoder_trainable);
    c.validate();
    return c;
}

json generator_config_to_json(const GeneratorConfig& c) {
    return json{{"base_channels", c.base_channels},
                {"channel_multipliers", c.channel_multipliers},
                {"attention_resolutions", c.attention_resolutions},
                {"le_resolutions", c.le_resolutions},
                {"p", c.p},
                {"time_embed_dim", c.time_embed_dim},
                {"cfg_drop_prob", c.cfg_drop_prob},
                {"res_blocks", c.res_blocks},
                {"heads", c.heads},
                {"norm_groups", c.norm_groups},
                {"ablation", ablation_name(c.ablation)},
                {"zero_init_residuals", c.zero_init_residuals},
                {"null_le_in_uncond", c.null_le_in_uncond}};
}

GeneratorConfig generator_config_from_json(const json& j) {
    GeneratorConfig c;
    maybe(j, "base_channels", c.base_channels);
    maybe(j, "channel_multipliers", c.channel_multipliers);
    maybe(j, "attention_resolutions", c.attention_resolutions);
    maybe(j, "le_resolutions", c.le_resolutions);
    maybe(j, "p", c.p);
    maybe(j, "time_embed_dim", c.time_embed_dim);
    maybe(j, "cfg_drop_prob", c.cfg_drop_prob);
    maybe(j, "res_blocks", c.res_blocks);
    maybe(j, "heads", c.heads);
    maybe(j, "norm_groups", c.norm_groups);
    if (j.contains("ablation"))
        c.ablation = ablation_from_name(j.at("ablation").get<std::string>());
    maybe(j, "zero_init_residuals", c.zero_init_residuals);
    maybe(j, "null_le_in_uncond", c.null_le_in_uncond);
    return c;
}

json model_config_to_json(const ModelConfig& c) {
    return json{{"schema_version", 1},
                {"encoder", encoder_config_to_json(c.enc)},
                {"generator", generator_config_to_json(c.gen)},
                {"schedule", {{"kind", schedule_kind_name(c.sched_kind)},
                              {"T", c.T},
                              {"beta_start", c.beta_start},
                              {"beta_end", c.beta_end}}},
                {"init_seed", c.init_seed}};
}

ModelConfig model_config_from_json(const json& j) {
    ModelConfig c;
    if (j.contains("encoder"))
        c.enc = encoder_config_from_json(j.at("encoder"));
    if (j.contains("generator"))
        c.gen = generator_config_from_json(j.at("generator"));
    if (j.contains("schedule")) {
        const json& s = j.at("schedule");
        if (s.contains("kind"))
            c.sched_kind = schedule_kind_from_name(s.at("kind").get<std::string>());
        maybe(s, "T", c.T);
        maybe(s, "beta_start", c.beta_start);
        maybe(s, "beta_end", c.beta_end);
    }
    maybe(j, "init_seed", c.init_seed);
    c.validate();
    return c;
}

json sampler_config_to_json(const SamplerConfig& c) {
    return json{{"ddim_steps", c.ddim_steps}, {"guidance_scale", c.guidance_scale}, {"eta", c.eta}};
}

SamplerConfig sampler_config_from_json(const json& j) {
    SamplerConfig c;
    maybe(j, "ddim_steps", c.ddim_steps);
    maybe(j, "guidance_scale", c.guidance_scale);
    maybe(j, "eta", c.eta);
    return c;
}

json pipeline_config_to_json(const PipelineConfig& c) {
    return json{{"source_size", c.source_size},
                {"image_size", c.image_size},
                {"fg_size", c.fg_size},
                {"min_area", c.min_area},
                {"max_area", c.max_area},
                {"hflip_prob", c.hflip_prob},
                {"rotation_deg", c.rotation_deg},
                {"perspective_mag", c.perspective_mag},
                {"blur_prob", c.blur_prob},
                {"blur_sigma_lo", c.blur_sigma_lo},
                {"blur_sigma_hi", c.blur_sigma_hi},
                {"blur_kernel", c.blur_kernel},
                {"fill_value", c.fill_value}};
}

PipelineConfig pipeline_config_from_json(const json& j) {
    PipelineConfig c;
    maybe(j, "source_size", c.source_size);
    maybe(j, "image_size", c.image_size);
    maybe(j, "fg_size", c.fg_size);
    maybe(j, "min_area", c.min_area);
    maybe(j, "max_area", c.max_area);
    maybe(j, "hflip_prob", c.hflip_prob);
    maybe(j, "rotation_deg", c.rotation_deg);
    maybe(j, "perspective_mag", c.perspective_mag);
    maybe(j, "blur_prob", c.blur_prob);
    maybe(j, "blur_sigma_lo", c.blur_sigma_lo);
    maybe(j, "blur_sigma_hi", c.blur_sigma_hi);
    maybe(j, "blur_kernel", c.blur_kernel);
    maybe(j, "fill_value", c.fill_value);
    c.validate();
    return c;
}

namespace {

const char* const kRunKeys[] = {"dataset_dir", "checkpoint", "output_dir", "seed",     "threads", "epochs", "lr",
                                "batch",       "ae_steps",   "ae_lr",      "model",    "sampler", "pipeline"};

} // namespace

void validate_run_config_json(const json& j) {
    if (!j.is_object())
        throw ValidationError("run config must be a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool known = false;
        for (const char* k : kRunKeys)
            known = known || it.key() == k;
        if (!known)
            throw ValidationError("unknown run config key: " + it.key());
    }
    for (const char* k : {"dataset_dir", "checkpoint", "output_dir"})
        if (j.contains(k) && !j.at(k).is_string())
            throw ValidationError(std::string(k) + " must be a string");
    for (const char* k : {"seed", "threads", "epochs", "batch", "ae_steps"})
        if (j.contains(k) && !j.at(k).is_number_integer() && !j.at(k).is_number_unsigned())
            throw ValidationError(std::string(k) + " must be an integer");
    for (const char* k : {"lr", "ae_lr"})
        if (j.contains(k) && !j.at(k).is_number())
            throw ValidationError(std::string(k) + " must be a number");
    for (const char* k : {"model", "sampler", "pipeline"})
        if (j.contains(k) && !j.at(k).is_object())
            throw ValidationError(std::string(k) + " must be an object");
}

json run_config_to_json(const RunConfig& c) {
    return json{{"dataset_dir", c.dataset_dir},
                {"checkpoint", c.checkpoint},
                {"output_dir", c.output_dir},
                {"seed", c.seed},
                {"threads", c.threads},
                {"epochs", c.epochs},
                {"lr", c.lr},
                {"batch", c.batch},
                {"ae_steps", c.ae_steps},
                {"ae_lr", c.ae_lr},
                {"model", c.model},
                {"sampler", c.sampler},
                {"pipeline", c.pipeline}};
}

RunConfig run_config_from_json(const json& j) {
    validate_run_config_json(j);
    RunConfig c;
    maybe(j, "dataset_dir", c.dataset_dir);
    maybe(j, "checkpoint", c.checkpoint);
    maybe(j, "output_dir", c.output_dir);
    maybe(j, "seed", c.seed);
    maybe(j, "threads", c.threads);
    maybe(j, "epochs", c.epochs);
    maybe(j, "lr", c.lr);
    maybe(j, "batch", c.batch);
    maybe(j, "ae_steps", c.ae_steps);
    maybe(j, "ae_lr", c.ae_lr);
    if (j.contains("model"))
        c.model = j.at("model");
    if (j.contains("sampler"))
        c.sampler = j.at("sampler");
    if (j.contains("pipeline"))
        c.pipeline = j.at("pipeline");
    return c;
}

} // namespace ccm
