#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "fedsp/data.hpp"
#include "fedsp/federation.hpp"
#include "fedsp/model.hpp"
#include "fedsp/pretrain.hpp"

namespace fedsp {

/// Invalid or inconsistent run configuration (CLI exit code 2).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A checkpoint the run depends on does not exist (CLI exit code 3).
class MissingCheckpoint : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Flat experiment description. Every field maps to one JSON key of the same
/// name; unknown keys are rejected.
struct RunConfig {
  std::string mode = "fedsp";
  std::uint64_t seed = 0;
  std::uint64_t data_seed = 0;
  std::string task = "third";

  std::size_t n_layers = 8;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t max_seq_len = 16;
  std::size_t prefix_len = 8;
  std::size_t reparam_hidden = 0;  // 0 disables reparametrisation

  std::size_t clients = 10;
  double client_fraction = 1.0;
  std::string partition = "iid";
  double dirichlet_alpha = 1.0;

  std::size_t rounds = 20;
  std::size_t local_steps = 10;
  std::optional<std::size_t> server_steps;  // null: same as local_steps
  std::size_t batch_size = 16;
  double warmup = 0.1;
  double lr_aux = 5e-4;
  double lr_prompt = 5e-4;
  double lr_server = 5e-4;
  double lr_kd = 5e-4;
  std::size_t kd_steps = 5000;
  std::string selection = "BOT";
  std::size_t aux_layers = 1;
  double prompt_init_std = 0.02;

  std::size_t pretrain_steps = 4000;
  double lr_pretrain = 1e-3;
  std::size_t pretrain_batch_size = 32;

  std::string global_checkpoint = "global.fspt";
  std::string aux_checkpoint;  // empty: distill inline when the mode needs it
  std::string out = "runs/fedsp";
  bool parallel_clients = false;
  bool wall_time = false;

  /// Checks every constraint the downstream modules impose. Throws ConfigError.
  void validate() const;

  TrainMode train_mode() const;
  LayerSelection layer_selection() const;
  ToyRule toy_rule() const;
  PartitionScheme partition_scheme() const;
  ModelConfig model_config(std::size_t vocab_size) const;
  FedConfig fed_config() const;
  PretrainConfig pretrain_config() const;
  KdConfig kd_config() const;
};

nlohmann::ordered_json to_json(const RunConfig& cfg);
/// Starts from defaults and applies every key of `j`. Throws ConfigError on
/// unknown keys or ill-typed values.
RunConfig config_from_json(const nlohmann::json& j);
RunConfig load_config(const std::filesystem::path& path);
void save_config(const std::filesystem::path& path, const RunConfig& cfg);
/// Applies "key=value"; the value is parsed as JSON when possible, otherwise
/// taken as a string.
void apply_override(RunConfig& cfg, const std::string& assignment);

}  // namespace fedsp
