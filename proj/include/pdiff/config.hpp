#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "pdiff/model.hpp"
#include "pdiff/sampler.hpp"
#include "pdiff/trainer.hpp"

namespace pdiff {

// Usage and configuration mistakes (exit code 2 at the command line).
class ConfigError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  SamplerConfig sampler;
  std::string manifest = "data/manifest.jsonl";
  std::string out = "runs/default";

  void set_seed(std::uint64_t seed);
};

struct ConfigKey {
  std::string name;
  std::string help;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

const std::vector<ConfigKey>& config_keys();

// Throws ConfigError for unknown keys or unparsable values.
void apply_setting(RunConfig& config, const std::string& key, const std::string& value);
// "key = value" lines, '#' starts a comment.
void apply_config_file(RunConfig& config, const std::filesystem::path& path);
std::string render_config(const RunConfig& config);

}  // namespace pdiff
