#ifndef MGN_CONFIG_HPP
#define MGN_CONFIG_HPP

#include <filesystem>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "mgn/eval.hpp"
#include "mgn/train.hpp"

namespace mgn {

inline constexpr int kRunConfigSchemaVersion = 1;

nlohmann::json to_json(const ModelConfig& config);
/// Strict: unknown keys raise ConfigError naming the key.
ModelConfig model_config_from_json(const nlohmann::json& j, const std::string& path = "model");

/// 16 hex digits of FNV-1a over the canonical JSON of the model configuration.
/// Feature files and checkpoints produced by equal configurations share it.
std::string config_hash(const ModelConfig& config);
std::string config_hash(const TrainConfig& config);

std::string fnv1a_hex(const std::string& bytes);

struct EvalConfig {
  std::string dataset_name = "synthetic";
  int batch_size = 32;
  bool multi_query = false;
  PoolMode pool = PoolMode::kAvg;
  bool rerank = false;
  RerankParams rerank_params;
};

struct PretrainedConfig {
  std::filesystem::path archive;
  std::filesystem::path mapping;
};

/// Everything a run needs, read from one JSON file.
struct RunConfig {
  int schema_version = kRunConfigSchemaVersion;
  std::filesystem::path dataset_root;
  std::optional<AblationVariant> variant;
  std::optional<PretrainedConfig> pretrained;
  TrainConfig train;
  EvalConfig eval;
};

nlohmann::json to_json(const RunConfig& config);
RunConfig run_config_from_json(const nlohmann::json& j);
/// Reads and validates a run configuration file. Relative dataset and weight
/// paths resolve against the file's directory.
RunConfig load_run_config(const std::filesystem::path& path);

/// Desk-scale defaults: tiny backbone, small PK batches, short schedule.
RunConfig desk_run_config(const std::filesystem::path& dataset_root);

}  // namespace mgn

#endif  // MGN_CONFIG_HPP
