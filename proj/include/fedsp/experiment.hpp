#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedsp/config.hpp"
#include "fedsp/data.hpp"
#include "fedsp/federation.hpp"

namespace fedsp {

ToyTasks tasks_for(const RunConfig& cfg);

/// Loads the pretrained global model named by the config, checks that its
/// architecture matches and applies the run's prompt geometry. Throws
/// MissingCheckpoint when the file is absent and ConfigError on mismatch.
GlobalModel load_global(const RunConfig& cfg, const Tokenizer& tokenizer);
AuxModel load_aux(const RunConfig& cfg, const GlobalModel& global);

Partition partition_for(const RunConfig& cfg, const Corpus& corpus);

/// Pretrains the global model; writes the checkpoint plus corpus, probes,
/// loss curve and config echo into `cfg.out`.
PretrainResult run_pretrain(const RunConfig& cfg);

/// Distills the auxiliary model for the configured mode; writes aux.fspt and
/// kd_curve.csv into `cfg.out`.
KdResult run_distill(const RunConfig& cfg);

/// Full run: writes config.json, partition.json, metrics.jsonl, summary.json,
/// the final prompts (or finetuned model) and, when distilled inline,
/// kd_curve.csv into `cfg.out`.
RunResult run_experiment(const RunConfig& cfg, const RunHooks& hooks = {});

void write_metrics_jsonl(const std::filesystem::path& path, const RunMetrics& metrics);
std::vector<RoundRecord> read_metrics_jsonl(const std::filesystem::path& path);
nlohmann::ordered_json summary_json(const RunConfig& cfg, const RunSummary& summary, std::size_t clients_per_round);
void write_kd_curve(const std::filesystem::path& path, const std::vector<double>& curve);
std::vector<double> read_kd_curve(const std::filesystem::path& path);

}  // namespace fedsp
