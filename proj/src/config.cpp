#include "fedsp/config.hpp"

#include <cmath>
#include <fstream>

namespace fedsp {

using json = nlohmann::json;

namespace {

template <typename F>
auto checked(const std::string& what, F&& f) {
  try {
    return f();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(what + ": " + e.what());
  }
}

}  // namespace

TrainMode RunConfig::train_mode() const { return checked("mode", [&] { return parse_mode(mode); }); }
LayerSelection RunConfig::layer_selection() const {
  return checked("selection", [&] { return parse_selection(selection); });
}
ToyRule RunConfig::toy_rule() const { return checked("task", [&] { return parse_rule(task); }); }
PartitionScheme RunConfig::partition_scheme() const {
  return checked("partition", [&] { return parse_scheme(partition); });
}

ModelConfig RunConfig::model_config(std::size_t vocab_size) const {
  ModelConfig m;
  m.n_layers = n_layers;
  m.d_model = d_model;
  m.n_heads = n_heads;
  m.vocab_size = vocab_size;
  m.max_seq_len = max_seq_len;
  m.prefix_len = prefix_len;
  m.reparam_hidden = reparam_hidden;
  return m;
}

KdConfig RunConfig::kd_config() const {
  KdConfig k;
  k.steps = kd_steps;
  k.lr = lr_kd;
  k.batch_size = batch_size;
  k.warmup_fraction = warmup;
  k.seed = derive_seed(seed, 4);
  return k;
}

FedConfig RunConfig::fed_config() const {
  FedConfig f;
  f.mode = train_mode();
  f.rounds = rounds;
  f.local_steps = local_steps;
  f.server_steps = server_steps;
  f.client_fraction = client_fraction;
  f.batch_size = batch_size;
  f.warmup_fraction = warmup;
  f.lr_aux = lr_aux;
  f.lr_prompt = lr_prompt;
  f.lr_server = lr_server;
  f.selection = layer_selection();
  f.aux_layers = aux_layers;
  f.kd = kd_config();
  f.prompt_init_std = prompt_init_std;
  f.seed = seed;
  f.parallel_clients = parallel_clients;
  f.record_wall_time = wall_time;
  return f;
}

PretrainConfig RunConfig::pretrain_config() const {
  PretrainConfig p;
  p.steps = pretrain_steps;
  p.lr = lr_pretrain;
  p.batch_size = pretrain_batch_size;
  p.warmup_fraction = warmup;
  p.seed = data_seed;
  return p;
}

void RunConfig::validate() const {
  const auto m = train_mode();
  layer_selection();
  toy_rule();
  partition_scheme();
  checked("model", [&] {
    model_config(2).validate();
    return 0;
  });
  if (clients < 1) throw ConfigError("clients must be >= 1");
  if (rounds < 1) throw ConfigError("rounds must be >= 1");
  if (local_steps < 1) throw ConfigError("local_steps must be >= 1");
  if (batch_size < 1 || pretrain_batch_size < 1) throw ConfigError("batch sizes must be >= 1");
  if (!(client_fraction > 0) || client_fraction > 1) throw ConfigError("client_fraction must be in (0, 1]");
  if (!(dirichlet_alpha > 0)) throw ConfigError("dirichlet_alpha must be positive");
  if (!(warmup >= 0) || warmup > 1) throw ConfigError("warmup must be in [0, 1]");
  for (double lr : {lr_aux, lr_prompt, lr_server, lr_kd, lr_pretrain}) {
    if (!std::isfinite(lr) || lr < 0) throw ConfigError("learning rates must be finite and >= 0");
  }
  if (!(prompt_init_std >= 0)) throw ConfigError("prompt_init_std must be >= 0");
  if (pretrain_steps < 1) throw ConfigError("pretrain_steps must be >= 1");
  if (is_fedsp_family(m)) {
    if (aux_layers < 1 || aux_layers > n_layers) throw ConfigError("aux_layers must be in [1, n_layers]");
    if (n_layers % aux_layers != 0) {
      throw ConfigError("aux_layers " + std::to_string(aux_layers) + " does not divide n_layers " +
                        std::to_string(n_layers));
    }
    if (m != TrainMode::fedsp_no_kd && aux_checkpoint.empty() && (kd_steps < 1 || !(lr_kd > 0))) {
      throw ConfigError("distillation needs kd_steps >= 1 and lr_kd > 0");
    }
  }
  if (out.empty()) throw ConfigError("out must name a directory");
}

#define FEDSP_CONFIG_FIELDS(X)                                                                                    \
  X(mode) X(seed) X(data_seed) X(task) X(n_layers) X(d_model) X(n_heads) X(max_seq_len) X(prefix_len)             \
  X(reparam_hidden) X(clients) X(client_fraction) X(partition) X(dirichlet_alpha) X(rounds) X(local_steps)       \
  X(server_steps) X(batch_size) X(warmup) X(lr_aux) X(lr_prompt) X(lr_server) X(lr_kd) X(kd_steps) X(selection)  \
  X(aux_layers) X(prompt_init_std) X(pretrain_steps) X(lr_pretrain) X(pretrain_batch_size) X(global_checkpoint) \
  X(aux_checkpoint) X(out) X(parallel_clients) X(wall_time)

namespace {

template <typename T>
nlohmann::ordered_json json_value(const T& v) {
  return v;
}

template <typename T>
nlohmann::ordered_json json_value(const std::optional<T>& v) {
  return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
}

}  // namespace

nlohmann::ordered_json to_json(const RunConfig& cfg) {
  nlohmann::ordered_json j;
#define X(name) j[#name] = json_value(cfg.name);
  FEDSP_CONFIG_FIELDS(X)
#undef X
  return j;
}

namespace {

template <typename T>
void read_field(const json& v, T& field) {
  field = v.get<T>();
}

template <typename T>
void read_field(const json& v, std::optional<T>& field) {
  if (v.is_null()) {
    field.reset();
  } else {
    field = v.get<T>();
  }
}

void assign(RunConfig& cfg, const std::string& key, const json& v) {
  try {
#define X(name)                     \
  if (key == #name) {               \
    read_field(v, cfg.name);        \
    return;                         \
  }
    FEDSP_CONFIG_FIELDS(X)
#undef X
  } catch (const json::exception& e) {
    throw ConfigError("config key '" + key + "': " + e.what());
  }
  throw ConfigError("unknown config key '" + key + "'");
}

}  // namespace

RunConfig config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  RunConfig cfg;
  for (const auto& [key, value] : j.items()) {
    // Unsigned fields must not silently wrap negative input.
    if (value.is_number_integer() && value.get<std::int64_t>() < 0) {
      throw ConfigError("config key '" + key + "' must not be negative");
    }
    assign(cfg, key, value);
  }
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(f);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

void save_config(const std::filesystem::path& path, const RunConfig& cfg) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
  f << to_json(cfg).dump(2) << '\n';
}

void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const auto key = assignment.substr(0, eq);
  const auto text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  if (value.is_number_integer() && value.get<std::int64_t>() < 0) {
    throw ConfigError("config key '" + key + "' must not be negative");
  }
  assign(cfg, key, value);
}

}  // namespace fedsp
