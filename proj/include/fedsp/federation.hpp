#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fedsp/data.hpp"
#include "fedsp/distill.hpp"
#include "fedsp/model.hpp"
#include "fedsp/optim.hpp"

namespace fedsp {

enum class TrainMode {
  fedsp,
  fedsp_no_kd,
  fedsp_no_cs,
  fedsp_no_at,
  fedprompt,
  fedprompt_single,
  central_finetune,
  central_prefix,
  zero_shot,
};

std::string to_string(TrainMode m);
TrainMode parse_mode(const std::string& s);
const std::vector<TrainMode>& all_modes();
bool is_fedsp_family(TrainMode m);
bool is_federated(TrainMode m);

/// SplitMix64 mix of a base seed and a stream index.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream);

/// Protocol envelope. Wire layout (little-endian): "FSPM", version u32,
/// direction u32, round u32, sender u32, payload_len u64, then the payload in
/// the FSPT tensor format. Sender 0 is the server; clients are 1..K.
struct RoundMessage {
  enum class Direction : std::uint32_t { server_to_client = 0, client_to_server = 1 };

  Direction direction = Direction::server_to_client;
  std::uint32_t round = 0;
  std::uint32_t sender = 0;
  std::vector<NamedTensor> payload;

  static constexpr std::uint32_t kVersion = 1;
  static constexpr std::size_t kHeaderBytes = 4 + 4 + 4 + 4 + 4 + 8;

  static RoundMessage carrying(Direction direction, std::uint32_t round, std::uint32_t sender, const PromptSet& prompts);
  /// Exact serialized length of the payload alone; this is what the byte
  /// counters accumulate.
  std::size_t payload_bytes() const { return encoded_size(payload); }
  std::vector<std::uint8_t> encode() const;
  static RoundMessage decode(std::span<const std::uint8_t> bytes);
};

/// Hyper-parameters of a client's local training.
struct LocalConfig {
  std::size_t batch_size = 16;
  double lr_aux = 5e-4;
  double lr_prompt = 5e-4;
  double warmup_fraction = 0.1;
  /// Steps per phase over the whole course; sizes both LR schedules.
  std::size_t total_steps = 200;
  AdamWOptions adamw{};
};

struct ClientState {
  std::uint32_t id = 0;
  AuxModel model;
  std::vector<std::size_t> shard;
  const Corpus* corpus = nullptr;
  LocalConfig config;
  std::uint64_t seed = 0;

  /// Working prompts: received values are copied in, so optimizer moments
  /// persist across rounds.
  PromptSet prompts;
  std::optional<AdamW> aux_opt;
  std::optional<AdamW> prompt_opt;
  std::optional<BatchStream> stream;
  std::size_t aux_steps_done = 0;
  std::size_t prompt_steps_done = 0;
  std::vector<double> last_losses;

  static ClientState create(std::uint32_t id, AuxModel model, std::vector<std::size_t> shard, const Corpus& corpus,
                            const PromptSet& prompt_template, const LocalConfig& config, std::uint64_t seed);
};

enum class Phase { start, after_alignment, after_capture };
using PhaseObserver = std::function<void(Phase, const ClientState&)>;

/// Weighted average (N_k / N) of every trainable prompt tensor, accumulated
/// in the given order.
PromptSet aggregate_prompts(const std::vector<std::pair<PromptSet, double>>& updates);

/// Alternating local training. Phase A updates the model with prompts frozen;
/// phase B updates prompts with the model frozen. `fedsp_no_at`, `fedprompt`
/// and `fedprompt_single` run phase B only. Returns a copy of the phase-B
/// prompts.
PromptSet client_local_round(ClientState& cs, const PromptSet& prompts_in, std::size_t steps, TrainMode mode,
                             const PhaseObserver& observe = {});

struct ServerState {
  GlobalModel global;
  PromptSet prompts;
  std::uint32_t round = 0;
  std::vector<std::size_t> proxy;
  std::vector<std::size_t> client_sizes;
  const Corpus* corpus = nullptr;

  std::size_t batch_size = 16;
  double lr = 5e-4;
  double warmup_fraction = 0.1;
  std::size_t total_steps = 0;  // schedule length; 0 sizes it by the first call
  std::uint64_t seed = 0;

  // Optimizer working copy; its moments persist across rounds.
  PromptSet working;
  std::optional<LinearWarmupDecay> schedule;
  std::optional<AdamW> opt;
  std::optional<BatchStream> stream;
  std::size_t steps_done = 0;

  std::size_t total_examples() const;
};

/// `steps` prompt-only updates through the frozen global model on the proxy
/// shard. steps == 0 returns the input unchanged.
PromptSet server_optimize(ServerState& ss, const PromptSet& prompts, std::size_t steps);

/// ceil(fraction * K) distinct ids from 1..K in ascending order; all ids when
/// fraction == 1.
std::vector<std::uint32_t> sample_clients(std::size_t k_total, double fraction, std::uint64_t round_seed);

struct FedConfig {
  TrainMode mode = TrainMode::fedsp;
  std::size_t rounds = 20;
  std::size_t local_steps = 10;
  std::optional<std::size_t> server_steps;  // defaults to local_steps
  double client_fraction = 1.0;
  std::size_t batch_size = 16;
  double warmup_fraction = 0.1;
  double lr_aux = 5e-4;
  double lr_prompt = 5e-4;
  double lr_server = 5e-4;
  LayerSelection selection = LayerSelection::bottom;
  std::size_t aux_layers = 1;
  KdConfig kd{};
  double prompt_init_std = 0.02;
  std::uint64_t seed = 0;
  bool parallel_clients = false;
  bool record_wall_time = false;

  std::size_t effective_server_steps() const;
  /// Cross-checks against the global model configuration; throws
  /// std::invalid_argument before any training happens.
  void validate(const ModelConfig& model) const;
};

struct RoundRecord {
  std::size_t round = 0;
  std::optional<double> train_loss_mean;
  double eval_acc = 0;
  std::uint64_t uploaded_bytes = 0;    // cumulative
  std::uint64_t downloaded_bytes = 0;  // cumulative
  double wall_ms = 0;
};

struct RunSummary {
  TrainMode mode = TrainMode::fedsp;
  double final_acc = 0;
  double best_acc = 0;
  std::size_t best_round = 0;
  std::uint64_t total_uploaded_bytes = 0;
  std::uint64_t total_downloaded_bytes = 0;
  std::size_t global_params = 0;
  std::size_t aux_params = 0;
  std::size_t prompt_payload_params = 0;
  std::size_t prompt_payload_bytes = 0;
};

struct RunMetrics {
  std::vector<RoundRecord> rounds;
  RunSummary summary;
};

/// Everything a run reads but never writes.
struct FedEnvironment {
  const GlobalModel* global = nullptr;
  const Corpus* corpus = nullptr;
  std::span<const McExample> probes;
  const Partition* partition = nullptr;
  /// Pre-distilled auxiliary model; when absent, fedsp modes distill inline.
  const AuxModel* distilled_aux = nullptr;
};

struct RunHooks {
  /// Every serialized RoundMessage, in send order.
  std::function<void(std::span<const std::uint8_t>)> on_message;
  PhaseObserver on_client_phase;
  /// Called around each server optimization with `after` false, then true.
  std::function<void(bool after, const ServerState&)> on_server_optimize;
};

struct RunResult {
  RunMetrics metrics;
  PromptSet prompts;                         // final global prompts (prompt modes)
  std::optional<GlobalModel> finetuned;      // central_finetune only
  std::optional<AuxModel> aux;               // initial client model (fedsp family)
  std::vector<double> kd_curve;              // when distilled inline
};

/// The auxiliary model a mode hands to clients before any round: KD'd copy,
/// raw copy, frozen global clone or frozen single block.
AuxModel initial_client_model(const FedConfig& cfg, const FedEnvironment& env, std::vector<double>* kd_curve);

RunResult run_federation(const FedConfig& cfg, const FedEnvironment& env, const RunHooks& hooks = {});

}  // namespace fedsp
