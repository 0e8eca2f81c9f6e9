#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "modsquad/moe.hpp"
#include "modsquad/training.hpp"

namespace modsquad {

using json = nlohmann::ordered_json;

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  BenchmarkConfig data;
  LossConfig loss;
  std::uint64_t seed = 1;

  // Cross-section checks (data and model must agree on token shape).
  void validate() const;
};

json to_json(const ModelConfig& c);
json to_json(const TrainConfig& c);
json to_json(const BenchmarkConfig& c);
json to_json(const LossConfig& c);
json to_json(const RunConfig& c);

// Missing keys keep their defaults; unknown keys and wrong types raise
// ConfigError naming the dotted field path.
ModelConfig model_config_from_json(const json& j, const std::string& path = "model");
RunConfig run_config_from_json(const json& j);

// Sets a dotted path ("train.epochs") to a value parsed as a JSON literal,
// falling back to a plain string.
void apply_override(json& doc, const std::string& dotted, const std::string& value);

// Reads a config file, applies overrides in order, then MODSQUAD_SEED. An
// `epochs` shortcut sets train.epochs and lowers warmup_epochs below it.
RunConfig load_run_config(const std::filesystem::path& file,
                          const std::vector<std::pair<std::string, std::string>>& overrides = {},
                          std::optional<std::size_t> epochs = std::nullopt);

}  // namespace modsquad
