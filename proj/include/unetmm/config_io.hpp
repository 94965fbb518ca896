#pragma once

#include <filesystem>
#include <string>

#include "unetmm/model_config.hpp"
#include "unetmm/training.hpp"

namespace unetmm {

/// Everything one experiment needs: the model, the analysis input shape and
/// the training schedule.
struct RunConfig {
    ModelConfig model;
    Shape input{1, 3, 256, 256};
    TrainConfig train;

    friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

/// Parses YAML with optional `model`, `input` and `train` maps. Missing keys
/// keep their defaults; unknown keys and bad values raise ConfigError
/// carrying the 1-based source line.
RunConfig parse_run_config(const std::string& yaml);
/// Throws ConfigError (line 0) if the file cannot be read.
RunConfig load_run_config(const std::filesystem::path& path);
/// YAML that parses back to an equal RunConfig.
std::string dump_run_config(const RunConfig& cfg);

}  // namespace unetmm
