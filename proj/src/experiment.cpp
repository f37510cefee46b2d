#include "fedsp/experiment.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "fedsp/checkpoint.hpp"

namespace fedsp {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
  return f;
}

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<NamedTensor> load_checkpoint(const std::string& path, const char* what) {
  if (path.empty() || !fs::exists(path)) throw MissingCheckpoint(std::string(what) + " checkpoint not found: " + path);
  return load_tensors(path);
}

}  // namespace

ToyTasks tasks_for(const RunConfig& cfg) {
  ToyTaskOptions opts;
  opts.task = cfg.toy_rule();
  return make_toy_tasks(cfg.data_seed, opts);
}

GlobalModel load_global(const RunConfig& cfg, const Tokenizer& tokenizer) {
  auto model = GlobalModel::from_checkpoint(load_checkpoint(cfg.global_checkpoint, "global model"));
  const auto& c = model.config();
  if (model.is_auxiliary()) throw ConfigError(cfg.global_checkpoint + " holds an auxiliary model");
  if (c.n_layers != cfg.n_layers || c.d_model != cfg.d_model || c.n_heads != cfg.n_heads ||
      c.max_seq_len != cfg.max_seq_len) {
    throw ConfigError("global checkpoint architecture (L=" + std::to_string(c.n_layers) + ", d=" +
                      std::to_string(c.d_model) + ", heads=" + std::to_string(c.n_heads) + ", max_seq_len=" +
                      std::to_string(c.max_seq_len) + ") differs from the config");
  }
  if (c.vocab_size != tokenizer.vocab_size()) {
    throw ConfigError("global checkpoint vocabulary " + std::to_string(c.vocab_size) + " differs from the corpus's " +
                      std::to_string(tokenizer.vocab_size()));
  }
  model.set_prompt_config(cfg.prefix_len, cfg.reparam_hidden);
  model.set_requires_grad(false);
  return model;
}

AuxModel load_aux(const RunConfig& cfg, const GlobalModel& global) {
  auto aux = AuxModel::from_checkpoint(load_checkpoint(cfg.aux_checkpoint, "auxiliary model"));
  if (!aux.is_auxiliary()) throw ConfigError(cfg.aux_checkpoint + " does not hold an auxiliary model");
  const auto& a = aux.config();
  const auto& g = global.config();
  if (a.n_layers != g.n_layers || a.d_model != g.d_model || a.n_heads != g.n_heads || a.vocab_size != g.vocab_size) {
    throw ConfigError("auxiliary checkpoint does not match the global model");
  }
  aux.set_prompt_config(cfg.prefix_len, cfg.reparam_hidden);
  aux.set_requires_grad(false);
  return aux;
}

Partition partition_for(const RunConfig& cfg, const Corpus& corpus) {
  try {
    return partition(corpus, cfg.clients, cfg.partition_scheme(), derive_seed(cfg.seed, 5), cfg.dirichlet_alpha);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

void write_kd_curve(const fs::path& path, const std::vector<double>& curve) {
  auto f = open_out(path);
  f << "step,loss\n";
  for (std::size_t i = 0; i < curve.size(); ++i) f << i << ',' << fmt_double(curve[i]) << '\n';
}

std::vector<double> read_kd_curve(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  std::getline(f, line);
  std::vector<double> out;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw std::runtime_error(path.string() + ": malformed line '" + line + "'");
    out.push_back(std::stod(line.substr(comma + 1)));
  }
  return out;
}

PretrainResult run_pretrain(const RunConfig& cfg) {
  cfg.validate();
  const auto tasks = tasks_for(cfg);
  const auto mc = cfg.model_config(tasks.corpus.tokenizer.vocab_size());
  auto result = pretrain(mc, tasks.corpus, cfg.pretrain_config());
  const fs::path out(cfg.out);
  fs::create_directories(out);
  const fs::path ckpt(cfg.global_checkpoint);
  if (ckpt.has_parent_path()) fs::create_directories(ckpt.parent_path());
  save_tensors(ckpt, result.model.checkpoint_tensors());
  save_config(out / "config.json", cfg);
  save_corpus_jsonl(out / "corpus.jsonl", tasks.corpus);
  save_examples_jsonl(out / "probes.jsonl", tasks.probes);
  auto f = open_out(out / "pretrain_loss.csv");
  f << "step,loss\n";
  for (std::size_t i = 0; i < result.losses.size(); ++i) f << i << ',' << fmt_double(result.losses[i]) << '\n';
  return result;
}

KdResult run_distill(const RunConfig& cfg) {
  cfg.validate();
  const auto mode = cfg.train_mode();
  if (!is_fedsp_family(mode)) throw ConfigError("distill applies to fedsp modes, not " + cfg.mode);
  if (cfg.n_layers % cfg.aux_layers != 0) throw ConfigError("aux_layers must divide n_layers");
  const auto tasks = tasks_for(cfg);
  const auto global = load_global(cfg, tasks.corpus.tokenizer);
  const auto part = partition_for(cfg, tasks.corpus);
  auto raw = build_auxiliary(global, cfg.layer_selection(), cfg.aux_layers, mode != TrainMode::fedsp_no_cs);
  auto kd = run_kd(global, raw, cfg.kd_config(), tasks.corpus, part.proxy);
  const fs::path out(cfg.out);
  fs::create_directories(out);
  save_config(out / "config.json", cfg);
  save_tensors(out / "aux.fspt", kd.aux.checkpoint_tensors());
  write_kd_curve(out / "kd_curve.csv", kd.curve);
  return kd;
}

void write_metrics_jsonl(const fs::path& path, const RunMetrics& metrics) {
  auto f = open_out(path);
  for (const auto& r : metrics.rounds) {
    ojson j;
    j["round"] = r.round;
    if (r.train_loss_mean) {
      j["train_loss_mean"] = *r.train_loss_mean;
    } else {
      j["train_loss_mean"] = nullptr;
    }
    j["eval_acc"] = r.eval_acc;
    j["uploaded_bytes"] = r.uploaded_bytes;
    j["downloaded_bytes"] = r.downloaded_bytes;
    j["wall_ms"] = r.wall_ms;
    f << j.dump() << '\n';
  }
}

std::vector<RoundRecord> read_metrics_jsonl(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  std::vector<RoundRecord> out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    RoundRecord r;
    r.round = j.at("round").get<std::size_t>();
    if (!j.at("train_loss_mean").is_null()) r.train_loss_mean = j.at("train_loss_mean").get<double>();
    r.eval_acc = j.at("eval_acc").get<double>();
    r.uploaded_bytes = j.at("uploaded_bytes").get<std::uint64_t>();
    r.downloaded_bytes = j.at("downloaded_bytes").get<std::uint64_t>();
    r.wall_ms = j.at("wall_ms").get<double>();
    out.push_back(r);
  }
  return out;
}

ojson summary_json(const RunConfig& cfg, const RunSummary& s, std::size_t clients_per_round) {
  ojson j;
  j["mode"] = to_string(s.mode);
  j["task"] = cfg.task;
  j["seed"] = cfg.seed;
  j["selection"] = cfg.selection;
  j["aux_layers"] = cfg.aux_layers;
  j["rounds"] = cfg.rounds;
  j["final_acc"] = s.final_acc;
  j["best_acc"] = s.best_acc;
  j["best_round"] = s.best_round;
  j["total_uploaded_bytes"] = s.total_uploaded_bytes;
  j["total_downloaded_bytes"] = s.total_downloaded_bytes;
  const std::uint64_t per_message =
      clients_per_round == 0 ? 0 : s.total_uploaded_bytes / (clients_per_round * cfg.rounds);
  j["uploaded_bytes_per_client_round"] = per_message;
  j["global_params"] = s.global_params;
  j["aux_params"] = s.aux_params;
  j["prompt_payload_params"] = s.prompt_payload_params;
  j["prompt_payload_bytes"] = s.prompt_payload_bytes;
  j["payload_ratio"] =
      s.global_params == 0 ? 0.0 : static_cast<double>(s.prompt_payload_params) / static_cast<double>(s.global_params);
  return j;
}

RunResult run_experiment(const RunConfig& cfg, const RunHooks& hooks) {
  cfg.validate();
  const auto fed = cfg.fed_config();
  const auto tasks = tasks_for(cfg);
  const auto global = load_global(cfg, tasks.corpus.tokenizer);
  const auto part = partition_for(cfg, tasks.corpus);

  std::optional<AuxModel> aux;
  const bool needs_kd = is_fedsp_family(fed.mode) && fed.mode != TrainMode::fedsp_no_kd;
  if (needs_kd && !cfg.aux_checkpoint.empty()) aux = load_aux(cfg, global);

  FedEnvironment env;
  env.global = &global;
  env.corpus = &tasks.corpus;
  env.probes = tasks.probes;
  env.partition = &part;
  env.distilled_aux = aux ? &*aux : nullptr;

  RunResult result;
  try {
    result = run_federation(fed, env, hooks);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }

  const fs::path out(cfg.out);
  fs::create_directories(out);
  save_config(out / "config.json", cfg);
  save_partition_json(out / "partition.json", part);
  write_metrics_jsonl(out / "metrics.jsonl", result.metrics);
  const std::size_t per_round =
      is_federated(fed.mode) ? sample_clients(cfg.clients, cfg.client_fraction, 0).size() : 0;
  {
    auto f = open_out(out / "summary.json");
    f << summary_json(cfg, result.metrics.summary, per_round).dump(2) << '\n';
  }
  if (result.finetuned) {
    save_tensors(out / "model.fspt", result.finetuned->checkpoint_tensors());
  } else if (fed.mode != TrainMode::zero_shot) {
    save_tensors(out / "prompts.fspt", result.prompts.named_parameters());
  }
  if (!result.kd_curve.empty()) write_kd_curve(out / "kd_curve.csv", result.kd_curve);
  return result;
}

}  // namespace fedsp
