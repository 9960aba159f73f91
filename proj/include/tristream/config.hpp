#pragma once

#include "tristream/trainer.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace tristream {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Every tunable of a run as one flat key-value document. Defaults are the
// reference hyperparameters; unknown keys are rejected.
struct RunConfig {
  ModelConfig model;
  AugmentationConfig augment;
  SslWeights ssl;
  OptimizerConfig pretrain = OptimizerConfig::pretrain_defaults();
  FinetuneConfig finetune;
  std::uint64_t seed = 0;
  bool deterministic = true;
  int workers = 1;

  static const std::vector<std::string>& keys();
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  std::map<std::string, std::string> to_map() const;

  // "key = value" lines; '#' starts a comment.
  void merge_file(const std::filesystem::path& path);
  void merge_text(const std::string& text, const std::string& source = "<text>");
  std::string dump() const;

  PretrainConfig pretrain_config() const { return {pretrain, augment, ssl}; }
};

// Model-only view used by checkpoints: the "model.*" subset of the schema.
std::map<std::string, std::string> model_config_to_map(const ModelConfig& config);
ModelConfig model_config_from_map(const std::map<std::string, std::string>& values);

// Seed layering: explicit flag, else TRISTREAM_SEED, else the config value.
std::uint64_t seed_from_environment(std::uint64_t fallback);

}  // namespace tristream
