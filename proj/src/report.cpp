#include "fedsp/report.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "fedsp/federation.hpp"

namespace fedsp {

namespace fs = std::filesystem;

std::vector<RunRecordEntry> collect_runs(const std::vector<fs::path>& roots) {
  std::vector<fs::path> files;
  for (const auto& root : roots) {
    if (!fs::exists(root)) throw std::runtime_error("no such run directory: " + root.string());
    if (fs::is_regular_file(root / "summary.json")) files.push_back(root / "summary.json");
    if (!fs::is_directory(root)) continue;
    for (const auto& e : fs::recursive_directory_iterator(root)) {
      if (e.is_regular_file() && e.path().filename() == "summary.json" && e.path().parent_path() != root) {
        files.push_back(e.path());
      }
    }
  }
  std::sort(files.begin(), files.end());
  files.erase(std::unique(files.begin(), files.end()), files.end());

  std::vector<RunRecordEntry> out;
  for (const auto& file : files) {
    std::ifstream f(file);
    const auto j = nlohmann::json::parse(f);
    RunRecordEntry r;
    r.dir = file.parent_path();
    r.mode = j.at("mode").get<std::string>();
    r.task = j.at("task").get<std::string>();
    r.selection = j.at("selection").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.aux_layers = j.at("aux_layers").get<std::size_t>();
    r.final_acc = j.at("final_acc").get<double>();
    r.best_acc = j.at("best_acc").get<double>();
    r.uploaded_bytes_per_client_round = j.at("uploaded_bytes_per_client_round").get<std::uint64_t>();
    r.total_uploaded_bytes = j.at("total_uploaded_bytes").get<std::uint64_t>();
    r.global_params = j.at("global_params").get<std::size_t>();
    r.aux_params = j.at("aux_params").get<std::size_t>();
    r.prompt_payload_params = j.at("prompt_payload_params").get<std::size_t>();
    r.payload_ratio = j.at("payload_ratio").get<double>();
    out.push_back(std::move(r));
  }
  return out;
}

std::string mode_label(const std::string& mode) {
  static const std::map<std::string, std::string> labels{
      {"zero_shot", "Zero-Shot"},
      {"central_finetune", "Finetune (central)"},
      {"central_prefix", "Prefix-Tuning (central)"},
      {"fedprompt", "FedPrompt"},
      {"fedprompt_single", "FedPrompt-Single"},
      {"fedsp", "FedSP"},
      {"fedsp_no_kd", "FedSP w/o KD"},
      {"fedsp_no_cs", "FedSP w/o CS"},
      {"fedsp_no_at", "FedSP w/o AT"},
  };
  auto it = labels.find(mode);
  return it == labels.end() ? mode : it->second;
}

namespace {

std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", 100.0 * v);
  return buf;
}

std::size_t mode_rank(const std::string& mode) {
  const auto& modes = all_modes();
  for (std::size_t i = 0; i < modes.size(); ++i) {
    if (to_string(modes[i]) == mode) return i;
  }
  return modes.size();
}

struct Mean {
  double sum = 0;
  std::size_t n = 0;
  void add(double v) {
    sum += v;
    ++n;
  }
  double value() const { return n ? sum / static_cast<double>(n) : 0.0; }
};

void accuracy_table(std::ostringstream& os, const std::vector<std::string>& row_keys,
                    const std::map<std::string, std::string>& row_labels, const std::vector<std::string>& tasks,
                    const std::map<std::pair<std::string, std::string>, Mean>& cells) {
  os << "| |";
  for (const auto& t : tasks) os << ' ' << t << " |";
  os << " Avg |\n|---|";
  for (std::size_t i = 0; i <= tasks.size(); ++i) os << "---|";
  os << '\n';
  for (const auto& key : row_keys) {
    os << "| " << row_labels.at(key) << " |";
    Mean avg;
    for (const auto& t : tasks) {
      auto it = cells.find({key, t});
      if (it == cells.end()) {
        os << " - |";
      } else {
        os << ' ' << pct(it->second.value()) << " |";
        avg.add(it->second.value());
      }
    }
    os << ' ' << (avg.n ? pct(avg.value()) : "-") << " |\n";
  }
}

}  // namespace

std::string render_report(const std::vector<RunRecordEntry>& runs) {
  std::ostringstream os;
  os << "# Results\n\n";
  if (runs.empty()) {
    os << "No runs found.\n";
    return os.str();
  }

  std::set<std::string> task_set;
  std::set<std::uint64_t> seeds;
  for (const auto& r : runs) {
    task_set.insert(r.task);
    seeds.insert(r.seed);
  }
  const std::vector<std::string> tasks(task_set.begin(), task_set.end());

  // Rows are modes; fedsp-family runs with a non-default layer choice get
  // their own row.
  auto row_key = [](const RunRecordEntry& r) {
    const bool aux = r.mode.rfind("fedsp", 0) == 0;
    if (aux && (r.selection != "BOT" || r.aux_layers != 1)) {
      return r.mode + " [" + r.selection + ", N=" + std::to_string(r.aux_layers) + "]";
    }
    return r.mode;
  };
  std::map<std::pair<std::string, std::string>, Mean> cells;
  std::map<std::string, std::string> labels;
  std::vector<std::string> rows;
  for (const auto& r : runs) {
    const auto key = row_key(r);
    cells[{key, r.task}].add(r.final_acc);
    if (labels.emplace(key, mode_label(r.mode) + key.substr(r.mode.size())).second) rows.push_back(key);
  }
  std::stable_sort(rows.begin(), rows.end(), [&](const std::string& a, const std::string& b) {
    const auto ma = a.substr(0, a.find(' '));
    const auto mb = b.substr(0, b.find(' '));
    if (mode_rank(ma) != mode_rank(mb)) return mode_rank(ma) < mode_rank(mb);
    return a < b;
  });

  os << "## Accuracy (%) by mode and task\n\n";
  os << "Final-round multiple-choice accuracy, mean over " << seeds.size() << " seed(s).\n\n";
  accuracy_table(os, rows, labels, tasks, cells);

  os << "\n## Efficiency\n\n";
  os << "| | Global params | Client model params | Payload params | Payload / global | Upload bytes per client-round |\n";
  os << "|---|---|---|---|---|---|\n";
  std::set<std::string> seen;
  for (const auto& key : rows) {
    auto it = std::find_if(runs.begin(), runs.end(), [&](const RunRecordEntry& r) { return row_key(r) == key; });
    if (!seen.insert(key).second) continue;
    const auto& r = *it;
    const auto mode = parse_mode(r.mode);
    std::string client_params = "-";
    if (mode == TrainMode::fedprompt || mode == TrainMode::central_finetune || mode == TrainMode::central_prefix) {
      client_params = std::to_string(r.global_params);
    } else if (is_fedsp_family(mode)) {
      client_params = std::to_string(r.aux_params);
    } else if (mode == TrainMode::fedprompt_single) {
      client_params = std::to_string(r.aux_params);
    }
    char ratio[32];
    std::snprintf(ratio, sizeof ratio, "%.2f%%", 100.0 * r.payload_ratio);
    os << "| " << labels.at(key) << " | " << r.global_params << " | " << client_params << " | "
       << (r.prompt_payload_params ? std::to_string(r.prompt_payload_params) : "-") << " | "
       << (r.prompt_payload_params ? ratio : "-") << " | " << r.uploaded_bytes_per_client_round << " |\n";
  }

  std::map<std::string, std::set<std::string>> selections_by_mode;
  for (const auto& r : runs) {
    if (r.mode.rfind("fedsp", 0) == 0) selections_by_mode[r.mode].insert(r.selection);
  }
  for (const auto& [mode, sels] : selections_by_mode) {
    if (sels.size() < 2) continue;
    os << "\n## Layer selection (" << mode_label(mode) << ")\n\n";
    std::map<std::pair<std::string, std::string>, Mean> sel_cells;
    for (const auto& r : runs) {
      if (r.mode == mode) sel_cells[{r.selection, r.task}].add(r.final_acc);
    }
    std::vector<std::string> sel_rows;
    std::map<std::string, std::string> sel_labels;
    for (const char* s : {"BOT", "MID", "TOP"}) {
      if (sels.count(s)) {
        sel_rows.emplace_back(s);
        sel_labels[s] = s;
      }
    }
    accuracy_table(os, sel_rows, sel_labels, tasks, sel_cells);
  }
  return os.str();
}

}  // namespace fedsp
