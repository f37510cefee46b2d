#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "fedsp/config.hpp"
#include "fedsp/experiment.hpp"

namespace fs = std::filesystem;
using namespace fedsp;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("fedsp_cli_test_" + std::to_string(::getpid())) / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(FEDSP_BIN) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// A model small enough to pretrain in well under a second.
std::string tiny_flags(const fs::path& dir, int rounds = 2) {
  return "--set n_layers=2 --set d_model=8 --set n_heads=2 --set prefix_len=2 --set pretrain_steps=20 "
         "--set kd_steps=5 --set local_steps=2 --clients 3 --rounds " + std::to_string(rounds) + " --global " +
         (dir / "global.fspt").string();
}

}  // namespace

TEST(Config, JsonRoundTrip) {
  RunConfig cfg;
  cfg.mode = "fedsp_no_cs";
  cfg.seed = 7;
  cfg.server_steps = 3;
  cfg.lr_prompt = 2e-4;
  cfg.selection = "TOP";
  const auto back = config_from_json(to_json(cfg));
  EXPECT_EQ(to_json(back).dump(), to_json(cfg).dump());
  EXPECT_EQ(back.server_steps, std::optional<std::size_t>(3));
}

TEST(Config, UnknownKeyRejected) {
  EXPECT_THROW(config_from_json(nlohmann::json{{"lr_prompts", 1e-3}}), ConfigError);
  EXPECT_THROW(config_from_json(nlohmann::json{{"rounds", "many"}}), ConfigError);
  EXPECT_THROW(config_from_json(nlohmann::json{{"rounds", -1}}), ConfigError);
  EXPECT_THROW(config_from_json(nlohmann::json::array()), ConfigError);
}

TEST(Config, ValidationCatchesInconsistencies) {
  auto bad = [](auto mutate) {
    RunConfig c;
    mutate(c);
    return c;
  };
  EXPECT_NO_THROW(RunConfig{}.validate());
  EXPECT_THROW(bad([](RunConfig& c) { c.aux_layers = 3; }).validate(), ConfigError);
  EXPECT_THROW(bad([](RunConfig& c) { c.mode = "fedavg"; }).validate(), ConfigError);
  EXPECT_THROW(bad([](RunConfig& c) { c.selection = "LEFT"; }).validate(), ConfigError);
  EXPECT_THROW(bad([](RunConfig& c) { c.client_fraction = 0; }).validate(), ConfigError);
  EXPECT_THROW(bad([](RunConfig& c) { c.d_model = 10; c.n_heads = 4; }).validate(), ConfigError);
  EXPECT_THROW(bad([](RunConfig& c) { c.lr_prompt = -1; }).validate(), ConfigError);
  EXPECT_THROW(bad([](RunConfig& c) { c.rounds = 0; }).validate(), ConfigError);
}

TEST(Config, OverridesParseJsonValues) {
  RunConfig cfg;
  apply_override(cfg, "rounds=50");
  apply_override(cfg, "selection=MID");
  apply_override(cfg, "server_steps=null");
  apply_override(cfg, "lr_server=1e-4");
  EXPECT_EQ(cfg.rounds, 50u);
  EXPECT_EQ(cfg.selection, "MID");
  EXPECT_FALSE(cfg.server_steps.has_value());
  EXPECT_EQ(cfg.lr_server, 1e-4);
  EXPECT_THROW(apply_override(cfg, "no_equals_sign"), ConfigError);
  EXPECT_THROW(apply_override(cfg, "bogus=1"), ConfigError);
}

TEST(Cli, ExitCodes) {
  const auto dir = scratch("exit");
  EXPECT_EQ(run_cli("--help"), 0);
  EXPECT_EQ(run_cli(""), 2);
  EXPECT_EQ(run_cli("frobnicate"), 2);
  EXPECT_EQ(run_cli("run --set bogus=1"), 2);
  EXPECT_EQ(run_cli("run --aux-layers 3"), 2);
  {
    std::ofstream f(dir / "bad.json");
    f << "{\"rounds\": ";
  }
  EXPECT_EQ(run_cli("run --config " + (dir / "bad.json").string()), 2);
  EXPECT_EQ(run_cli("run --global " + (dir / "absent.fspt").string() + " --out " + (dir / "r").string()), 3);
  EXPECT_EQ(run_cli("eval --global " + (dir / "absent.fspt").string()), 3);
}

TEST(Cli, EndToEndRunsAreReproducible) {
  const auto dir = scratch("e2e");
  const auto flags = tiny_flags(dir);
  ASSERT_EQ(run_cli("pretrain " + flags + " --out " + (dir / "pre").string()), 0);
  ASSERT_TRUE(fs::exists(dir / "global.fspt"));

  for (const char* name : {"a", "b"}) {
    ASSERT_EQ(run_cli("run --mode fedsp --seed 0 " + flags + " --out " + (dir / name).string()), 0);
  }
  for (const char* file : {"metrics.jsonl", "summary.json", "prompts.fspt", "kd_curve.csv"}) {
    ASSERT_TRUE(fs::exists(dir / "a" / file)) << file;
    EXPECT_EQ(slurp(dir / "a" / file), slurp(dir / "b" / file)) << file;
  }
  // The resolved config is echoed into the run directory and reproduces the run.
  const auto echoed = load_config(dir / "a" / "config.json");
  EXPECT_EQ(echoed.mode, "fedsp");
  EXPECT_EQ(echoed.n_layers, 2u);
  ASSERT_EQ(run_cli("run --config " + (dir / "a" / "config.json").string() + " --out " + (dir / "c").string()), 0);
  EXPECT_EQ(slurp(dir / "a" / "metrics.jsonl"), slurp(dir / "c" / "metrics.jsonl"));

  const auto rounds = read_metrics_jsonl(dir / "a" / "metrics.jsonl");
  ASSERT_EQ(rounds.size(), 2u);
  for (std::size_t i = 0; i < rounds.size(); ++i) {
    EXPECT_EQ(rounds[i].round, i + 1);
    EXPECT_GT(rounds[i].uploaded_bytes, 0u);
    EXPECT_EQ(rounds[i].wall_ms, 0.0);
  }
  EXPECT_EQ(rounds[1].uploaded_bytes, 2 * rounds[0].uploaded_bytes);

  ASSERT_EQ(run_cli("run --mode zero_shot " + flags + " --out " + (dir / "zs").string()), 0);
  const auto zs = read_metrics_jsonl(dir / "zs" / "metrics.jsonl");
  ASSERT_FALSE(zs.empty());
  EXPECT_EQ(zs.back().uploaded_bytes, 0u);
  EXPECT_EQ(zs.back().downloaded_bytes, 0u);

  ASSERT_EQ(run_cli("eval " + flags + " --prompts " + (dir / "a" / "prompts.fspt").string()), 0);
  EXPECT_EQ(run_cli("eval " + flags + " --prompts " + (dir / "missing.fspt").string()), 3);

  ASSERT_EQ(run_cli("report " + dir.string() + " --out " + (dir / "report.md").string()), 0);
  const auto report = slurp(dir / "report.md");
  EXPECT_NE(report.find("FedSP"), std::string::npos);
  EXPECT_NE(report.find("Zero"), std::string::npos);
}

TEST(Cli, SweepWritesReport) {
  const auto dir = scratch("sweep");
  const auto flags = tiny_flags(dir, 1);
  ASSERT_EQ(run_cli("pretrain " + flags + " --out " + (dir / "pre").string()), 0);
  ASSERT_EQ(run_cli("sweep " + flags + " --grid selection=BOT,TOP --jobs 2 --out " +
                    (dir / "sw").string()),
            0);
  EXPECT_TRUE(fs::exists(dir / "sw" / "selection=BOT" / "metrics.jsonl"));
  EXPECT_TRUE(fs::exists(dir / "sw" / "selection=TOP" / "metrics.jsonl"));
  const auto report = slurp(dir / "sw" / "report.md");
  EXPECT_NE(report.find("TOP"), std::string::npos);
  EXPECT_EQ(run_cli("sweep --grid selection " + flags + " --out " + (dir / "bad").string()), 2);
}

TEST(Cli, GoldenReportRenders) {
  const auto dir = scratch("golden");
  ASSERT_EQ(run_cli(std::string("report ") + FEDSP_GOLDEN + "/runs --out " + (dir / "report.md").string()), 0);
  EXPECT_EQ(slurp(dir / "report.md"), slurp(fs::path(FEDSP_GOLDEN) / "report.md"));
  auto acc = [](const char* run) {
    return nlohmann::json::parse(slurp(fs::path(FEDSP_GOLDEN) / "runs" / run / "summary.json")).at("final_acc").get<double>();
  };
  EXPECT_GT(acc("fedsp_s0"), acc("fedprompt_single_s0"));
  EXPECT_GT(acc("fedsp_s0"), acc("fedsp_no_kd_s0"));
  EXPECT_GT(acc("central_finetune_s0"), acc("fedsp_s0"));
}
