// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>

#include <json.hpp>

#include "ccm/data_pipeline.hpp"
#include "ccm/encoders.hpp"
#include "ccm/generator.hpp"

namespace ccm {

struct ModelConfig;
struct SamplerConfig;

nlohmann::json encoder_config_to_json(const EncoderConfig& c);
EncoderConfig encoder_config_from_json(const nlohmann::json& j);

nlohmann::json generator_config_to_json(const GeneratorConfig& c);
GeneratorConfig generator_config_from_json(const nlohmann::json& j);

nlohmann::json model_config_to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

nlohmann::json sampler_config_to_json(const SamplerConfig& c);
SamplerConfig sampler_config_from_json(const nlohmann::json& j);

nlohmann::json pipeline_config_to_json(const PipelineConfig& c);
PipelineConfig pipeline_config_from_json(const nlohmann::json& j);

// Fully resolved run configuration for the CLI; every run writes it
// beside its outputs.
struct RunConfig {
    std::string dataset_dir = "dataset";
    std::string checkpoint = "model.ckpt";
    std::string output_dir = "outputs";
    std::uint64_t seed = 0;
    int threads = 0; // 0 = library decides (CONTROLCOM_MICRO_THREADS caps)
    // training
    int epochs = 2000;
    double lr = 1e-4;
    int batch = 8;
    int ae_steps = 400;
    double ae_lr = 2e-3;
    // components
    nlohmann::json model;    // ModelConfig overrides
    nlohmann::json sampler;  // SamplerConfig overrides
    nlohmann::json pipeline; // PipelineConfig overrides
};

nlohmann::json run_config_to_json(const RunConfig& c);
RunConfig run_config_from_json(const nlohmann::json& j);
// Throws ValidationError when the document has unknown keys or wrong types.
void validate_run_config_json(const nlohmann::json& j);

} // namespace ccm
