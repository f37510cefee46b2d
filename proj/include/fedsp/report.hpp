#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace fedsp {

/// One finished run as seen by the report: its summary.json fields.
struct RunRecordEntry {
  std::filesystem::path dir;
  std::string mode;
  std::string task;
  std::string selection;
  std::uint64_t seed = 0;
  std::size_t aux_layers = 1;
  double final_acc = 0;
  double best_acc = 0;
  std::uint64_t uploaded_bytes_per_client_round = 0;
  std::uint64_t total_uploaded_bytes = 0;
  std::size_t global_params = 0;
  std::size_t aux_params = 0;
  std::size_t prompt_payload_params = 0;
  double payload_ratio = 0;
};

/// Every run directory (one holding summary.json) under the given roots, in
/// path order.
std::vector<RunRecordEntry> collect_runs(const std::vector<std::filesystem::path>& roots);

/// Markdown report: accuracy by mode and task (mean over seeds), an
/// efficiency table, and a layer-selection table when several selections
/// are present.
std::string render_report(const std::vector<RunRecordEntry>& runs);

/// Row label used in the accuracy tables for a mode.
std::string mode_label(const std::string& mode);

}  // namespace fedsp
