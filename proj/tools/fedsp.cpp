// fedsp: command-line front end for the prompt-exchange federated simulator.
//
//   fedsp pretrain --config cfg.json
//   fedsp distill  --config cfg.json --out runs/kd
//   fedsp run      --mode fedsp --seed 0 --out runs/fedsp
//   fedsp eval     --checkpoint global.fspt --prompts runs/fedsp/prompts.fspt
//   fedsp report   runs/ --out report.md
//   fedsp sweep    --grid selection=BOT,MID,TOP --out runs/sweep

#include <atomic>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "fedsp/checkpoint.hpp"
#include "fedsp/config.hpp"
#include "fedsp/experiment.hpp"
#include "fedsp/report.hpp"

namespace fs = std::filesystem;
using namespace fedsp;

namespace {

struct CommonFlags {
  std::string config_file;
  std::vector<std::string> overrides;
  std::optional<std::string> mode, selection, out, global, aux, task;
  std::optional<std::size_t> rounds, clients, aux_layers, prefix_len, reparam, local_steps;
  std::optional<std::uint64_t> seed;

  void attach(CLI::App* app) {
    app->add_option("--config", config_file, "Flat JSON run configuration")->check(CLI::ExistingFile);
    app->add_option("--set", overrides, "Override a config key: key=value (repeatable)");
    app->add_option("--mode", mode, "Training mode");
    app->add_option("--rounds", rounds, "Federated rounds T");
    app->add_option("--clients", clients, "Number of clients K");
    app->add_option("--selection", selection, "Auxiliary layer selection: BOT, MID or TOP");
    app->add_option("--aux-layers", aux_layers, "Blocks N kept in the auxiliary model");
    app->add_option("--prefix-len", prefix_len, "Prompt slots P per layer");
    app->add_option("--reparam", reparam, "Reparametrisation hidden size (0 disables)");
    app->add_option("--local-steps", local_steps, "Local steps per phase and round");
    app->add_option("--task", task, "Downstream toy task: first, second or third");
    app->add_option("--seed", seed, "Run seed");
    app->add_option("--out", out, "Output directory");
    app->add_option("--global", global, "Global model checkpoint");
    app->add_option("--aux", aux, "Distilled auxiliary checkpoint");
  }

  RunConfig resolve() const {
    RunConfig cfg = config_file.empty() ? RunConfig{} : load_config(config_file);
    for (const auto& o : overrides) apply_override(cfg, o);
    if (mode) cfg.mode = *mode;
    if (rounds) cfg.rounds = *rounds;
    if (clients) cfg.clients = *clients;
    if (selection) cfg.selection = *selection;
    if (aux_layers) cfg.aux_layers = *aux_layers;
    if (prefix_len) cfg.prefix_len = *prefix_len;
    if (reparam) cfg.reparam_hidden = *reparam;
    if (local_steps) cfg.local_steps = *local_steps;
    if (task) cfg.task = *task;
    if (seed) cfg.seed = *seed;
    if (out) cfg.out = *out;
    if (global) cfg.global_checkpoint = *global;
    if (aux) cfg.aux_checkpoint = *aux;
    cfg.validate();
    return cfg;
  }
};

void print_summary(const RunConfig& cfg, const RunResult& r) {
  const auto& s = r.metrics.summary;
  std::printf("%s seed=%llu final_acc=%.4f best_acc=%.4f uploaded_bytes=%llu -> %s\n", cfg.mode.c_str(),
              static_cast<unsigned long long>(cfg.seed), s.final_acc, s.best_acc,
              static_cast<unsigned long long>(s.total_uploaded_bytes), cfg.out.c_str());
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) out.push_back(item);
  return out;
}

int cmd_sweep(const RunConfig& base, const std::vector<std::string>& grid_args, std::size_t jobs) {
  std::vector<std::pair<std::string, std::vector<std::string>>> grid;
  for (const auto& g : grid_args) {
    const auto eq = g.find('=');
    if (eq == std::string::npos || eq == 0 || eq + 1 == g.size()) throw ConfigError("grid '" + g + "' is not key=v1,v2");
    grid.emplace_back(g.substr(0, eq), split(g.substr(eq + 1), ','));
  }
  if (grid.empty()) {
    grid = {{"lr_prompt", {"1e-4", "2e-4", "5e-4"}}, {"rounds", {"20", "50", "100", "200"}}, {"local_steps", {"10", "20"}}};
  }

  std::vector<RunConfig> runs{base};
  std::vector<std::string> names{""};
  for (const auto& [key, values] : grid) {
    std::vector<RunConfig> next_runs;
    std::vector<std::string> next_names;
    for (std::size_t i = 0; i < runs.size(); ++i) {
      for (const auto& v : values) {
        auto cfg = runs[i];
        apply_override(cfg, key + "=" + v);
        next_runs.push_back(cfg);
        next_names.push_back(names[i] + (names[i].empty() ? "" : "_") + key + "=" + v);
      }
    }
    runs = std::move(next_runs);
    names = std::move(next_names);
  }
  for (std::size_t i = 0; i < runs.size(); ++i) {
    runs[i].out = (fs::path(base.out) / names[i]).string();
    runs[i].validate();
  }

  std::atomic<std::size_t> next{0};
  std::mutex io;
  std::exception_ptr failure;
  auto worker = [&] {
    for (std::size_t i; (i = next++) < runs.size();) {
      try {
        auto r = run_experiment(runs[i]);
        std::lock_guard<std::mutex> lock(io);
        print_summary(runs[i], r);
      } catch (...) {
        std::lock_guard<std::mutex> lock(io);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t j = 0; j < std::max<std::size_t>(1, jobs); ++j) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);

  const auto report = render_report(collect_runs({base.out}));
  std::ofstream f(fs::path(base.out) / "report.md", std::ios::trunc);
  f << report;
  std::cout << report;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated soft-prompt exchange simulator"};
  app.require_subcommand(1);

  CommonFlags pre_flags, kd_flags, run_flags, eval_flags, sweep_flags;
  auto* pre = app.add_subcommand("pretrain", "Pretrain the toy global model");
  pre_flags.attach(pre);
  auto* distill = app.add_subcommand("distill", "Distill the auxiliary model from the global model");
  kd_flags.attach(distill);
  auto* run = app.add_subcommand("run", "Run one training mode");
  run_flags.attach(run);

  auto* eval = app.add_subcommand("eval", "Multiple-choice accuracy of a checkpoint");
  eval_flags.attach(eval);
  std::string eval_checkpoint, eval_prompts;
  eval->add_option("--checkpoint", eval_checkpoint, "Model checkpoint (defaults to the global checkpoint)");
  eval->add_option("--prompts", eval_prompts, "Prompt checkpoint to attach");

  auto* report = app.add_subcommand("report", "Render Markdown tables from finished runs");
  std::vector<std::string> report_dirs;
  std::string report_out;
  report->add_option("runs", report_dirs, "Run directories (searched recursively)")->required();
  report->add_option("--out", report_out, "Write the report here instead of stdout");

  auto* sweep = app.add_subcommand("sweep", "Grid of runs followed by a report");
  sweep_flags.attach(sweep);
  std::vector<std::string> grid;
  std::size_t jobs = 1;
  sweep->add_option("--grid", grid, "key=v1,v2,... (repeatable; cartesian product)");
  sweep->add_option("--jobs", jobs, "Runs executed concurrently")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "fedsp: " << e.what() << '\n';
    return 2;
  }

  try {
    if (*pre) {
      const auto cfg = pre_flags.resolve();
      auto r = run_pretrain(cfg);
      std::printf("pretrained %zu steps, final loss %.4f -> %s\n", r.losses.size(), r.losses.back(),
                  cfg.global_checkpoint.c_str());
    } else if (*distill) {
      const auto cfg = kd_flags.resolve();
      auto r = run_distill(cfg);
      std::printf("distilled %zu steps, loss %.6f -> %.6f -> %s\n", r.curve.size() - 1, r.curve.front(),
                  r.curve.back(), (fs::path(cfg.out) / "aux.fspt").c_str());
    } else if (*run) {
      const auto cfg = run_flags.resolve();
      print_summary(cfg, run_experiment(cfg));
    } else if (*eval) {
      auto cfg = eval_flags.resolve();
      if (!eval_checkpoint.empty()) cfg.global_checkpoint = eval_checkpoint;
      const auto tasks = tasks_for(cfg);
      const auto model = load_global(cfg, tasks.corpus.tokenizer);
      std::optional<PromptSet> prompts;
      if (!eval_prompts.empty()) {
        if (!fs::exists(eval_prompts)) throw MissingCheckpoint("prompt checkpoint not found: " + eval_prompts);
        prompts = PromptSet::from_named(load_tensors(eval_prompts));
      }
      const double acc = mc_accuracy(model, prompts ? &*prompts : nullptr, tasks.corpus.tokenizer, tasks.probes);
      std::printf("{\"eval_acc\": %.17g, \"examples\": %zu}\n", acc, tasks.probes.size());
    } else if (*report) {
      std::vector<fs::path> roots(report_dirs.begin(), report_dirs.end());
      const auto text = render_report(collect_runs(roots));
      if (report_out.empty()) {
        std::cout << text;
      } else {
        std::ofstream f(report_out, std::ios::trunc);
        if (!f) throw std::runtime_error("cannot write " + report_out);
        f << text;
      }
    } else if (*sweep) {
      return cmd_sweep(sweep_flags.resolve(), grid, jobs);
    }
  } catch (const ConfigError& e) {
    std::cerr << "fedsp: config error: " << e.what() << '\n';
    return 2;
  } catch (const MissingCheckpoint& e) {
    std::cerr << "fedsp: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "fedsp: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
