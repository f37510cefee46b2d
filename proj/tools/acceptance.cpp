// fedsp_acceptance: end-to-end acceptance checks, one PASS/FAIL line per
// criterion. Expensive artifacts (pretrained global model, distilled
// auxiliary models) are cached in the work directory and reused while their
// configuration is unchanged.
//
//   fedsp_acceptance --work build/acceptance [--strict]

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <sys/wait.h>

#include <CLI11.hpp>

#include "fedsp/checkpoint.hpp"
#include "fedsp/config.hpp"
#include "fedsp/experiment.hpp"
#include "fedsp/ops.hpp"
#include "gradcheck.hpp"

namespace fs = std::filesystem;
using namespace fedsp;
using fedsp::testing::gradcheck;

namespace {

struct Verdict {
  bool pass = true;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

Tensor randn(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  std::vector<double> v(numel_of(shape));
  for (auto& x : v) x = n(rng);
  return Tensor::from(std::move(shape), std::move(v));
}

Tensor readout(const Tensor& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return ops::sum(ops::mul(y, randn(y.shape(), rng)));
}

bool same_bits(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::memcmp(a.data().data(), b.data().data(), 8 * a.numel()) == 0;
}

std::uint64_t digest(const PromptSet& p) { return checksum(p.named_parameters()); }
std::uint64_t digest(const TransformerLM& m) { return checksum(m.named_parameters()); }

// ---------------------------------------------------------------------------
// Shared experiment state

// Scaled-down toy configuration for the end-to-end criteria.
RunConfig base_config(const fs::path& work) {
  RunConfig c;
  c.clients = 4;
  c.rounds = 10;
  c.local_steps = 10;
  c.aux_layers = 2;
  c.kd_steps = 2000;
  c.lr_prompt = 5e-3;
  c.lr_server = 2e-3;
  c.lr_aux = 2e-5;
  c.global_checkpoint = (work / "global.fspt").string();
  return c;
}

// Re-runs `make` unless `dir` holds a config echo equal to `cfg`.
template <class Make>
void cached(const fs::path& dir, const RunConfig& cfg, const fs::path& artifact, Make make) {
  const auto echo = dir / "config.json";
  if (fs::exists(artifact) && fs::exists(echo) && to_json(load_config(echo)).dump() == to_json(cfg).dump()) {
    return;
  }
  make();
}

struct Env {
  fs::path work;
  fs::path fedsp_bin;
  RunConfig base;
  std::map<std::pair<std::string, std::uint64_t>, RunResult> results;
  std::map<std::pair<std::string, std::uint64_t>, fs::path> dirs;
};

void ensure_global(Env& e) {
  RunConfig cfg;
  cfg.global_checkpoint = e.base.global_checkpoint;
  cfg.out = (e.work / "pretrain").string();
  cached(cfg.out, cfg, cfg.global_checkpoint, [&] {
    std::printf("  pretraining global model (%zu steps)...\n", cfg.pretrain_steps);
    std::fflush(stdout);
    run_pretrain(cfg);
  });
}

std::string ensure_aux(Env& e, const std::string& mode, std::uint64_t seed) {
  // Only the fields distillation reads, so unrelated tuning keeps the cache.
  RunConfig cfg;
  cfg.global_checkpoint = e.base.global_checkpoint;
  cfg.clients = e.base.clients;
  cfg.aux_layers = e.base.aux_layers;
  cfg.selection = e.base.selection;
  cfg.kd_steps = e.base.kd_steps;
  cfg.lr_kd = e.base.lr_kd;
  cfg.mode = mode;
  cfg.seed = seed;
  cfg.out = (e.work / fmt("kd_%s_%llu", mode.c_str(), static_cast<unsigned long long>(seed))).string();
  const auto aux = fs::path(cfg.out) / "aux.fspt";
  cached(cfg.out, cfg, aux, [&] {
    std::printf("  distilling %s aux for seed %llu (%zu steps)...\n", mode.c_str(),
                static_cast<unsigned long long>(seed), cfg.kd_steps);
    std::fflush(stdout);
    run_distill(cfg);
  });
  return aux.string();
}

RunConfig run_config(Env& e, const std::string& mode, std::uint64_t seed, const std::string& tag = "") {
  auto cfg = e.base;
  cfg.mode = mode;
  cfg.seed = seed;
  if (mode == "fedsp" || mode == "fedsp_no_at") cfg.aux_checkpoint = ensure_aux(e, "fedsp", seed);
  if (mode == "fedsp_no_cs") cfg.aux_checkpoint = ensure_aux(e, "fedsp_no_cs", seed);
  cfg.out = (e.work / "runs" / fmt("%s_s%llu%s", mode.c_str(), static_cast<unsigned long long>(seed), tag.c_str()))
                .string();
  return cfg;
}

const RunResult& run(Env& e, const std::string& mode, std::uint64_t seed, const RunHooks& hooks = {}) {
  const auto key = std::make_pair(mode, seed);
  if (auto it = e.results.find(key); it != e.results.end()) return it->second;
  const auto cfg = run_config(e, mode, seed);
  const auto t0 = Clock::now();
  auto r = run_experiment(cfg, hooks);
  std::printf("  %-18s seed %llu  final_acc %.3f  round5 %.3f  (%.0f s)\n", mode.c_str(),
              static_cast<unsigned long long>(seed), r.metrics.summary.final_acc,
              r.metrics.rounds.size() >= 5 ? r.metrics.rounds[4].eval_acc : r.metrics.summary.final_acc,
              seconds_since(t0));
  std::fflush(stdout);
  e.dirs[key] = cfg.out;
  return e.results.emplace(key, std::move(r)).first->second;
}

// ---------------------------------------------------------------------------
// Criteria

Verdict gradient_fidelity() {
  const auto t0 = Clock::now();
  double worst = 0;
  std::string where;
  std::size_t coords = 0;
  auto check = [&](const std::string& what, const std::function<Tensor()>& loss, const std::vector<NamedTensor>& ps) {
    const auto r = gradcheck(loss, ps);
    coords += r.coords;
    if (r.worst_rel >= worst) {
      worst = r.worst_rel;
      where = what + ":" + r.worst_at;
    }
  };
  std::mt19937_64 rng(1);
  auto a = randn({2, 3, 4}, rng), b = randn({4, 5}, rng), c = randn({2, 4, 3}, rng), r4 = randn({4}, rng);
  auto a2 = randn({2, 3, 4}, rng), x = randn({3, 5}, rng, 2.0), g = randn({4}, rng), bb = randn({4}, rng);
  auto table = randn({5, 3}, rng), s = randn({2, 3, 5}, rng), t = randn({2, 3, 5}, rng), m = randn({3, 4}, rng);
  auto ab = randn({2, 2, 4}, rng);
  const std::vector<std::int32_t> ids{0, 3, 3, 1, 4, 0};
  const std::vector<std::int32_t> targets{1, 4, -1, 0, 2, 2};
  check("matmul", [&] { return readout(ops::matmul(a, b), 1); }, {{"a", a}, {"b", b}});
  check("bmm", [&] { return readout(ops::matmul(a, c), 2); }, {{"a", a}, {"c", c}});
  check("add", [&] { return readout(ops::add(a, r4), 3); }, {{"a", a}, {"r", r4}});
  check("sub", [&] { return readout(ops::sub(a, a2), 4); }, {{"a", a}, {"a2", a2}});
  check("mul", [&] { return readout(ops::mul(a, r4), 5); }, {{"a", a}, {"r", r4}});
  check("scale", [&] { return readout(ops::scale(a, -1.7), 6); }, {{"a", a}});
  check("gelu", [&] { return readout(ops::gelu(x), 7); }, {{"x", x}});
  check("tanh", [&] { return readout(ops::tanh(x), 8); }, {{"x", x}});
  check("softmax", [&] { return readout(ops::softmax(x), 9); }, {{"x", x}});
  check("layer_norm", [&] { return readout(ops::layer_norm(a, g, bb), 10); }, {{"a", a}, {"g", g}, {"b", bb}});
  check("embedding", [&] { return readout(ops::embedding(table, ids, {2, 3}), 11); }, {{"table", table}});
  check("concat", [&] { return readout(ops::concat({a, ab}, 1), 12); }, {{"a", a}, {"ab", ab}});
  check("slice", [&] { return readout(ops::slice(a, 2, 1, 2), 13); }, {{"a", a}});
  check("transpose", [&] { return readout(ops::transpose(a), 14); }, {{"a", a}});
  check("reshape", [&] { return readout(ops::reshape(a, {4, 6}), 15); }, {{"a", a}});
  check("permute", [&] { return readout(ops::permute(a, {1, 0, 2}), 16); }, {{"a", a}});
  check("expand", [&] { return readout(ops::expand(m, {2}), 17); }, {{"m", m}});
  check("causal_mask", [&] { return readout(ops::softmax(ops::causal_mask(s, 2)), 18); }, {{"s", s}});
  check("mean", [&] { return ops::mean(ops::mul(s, s)); }, {{"s", s}});
  check("mse", [&] { return ops::mse(s, t); }, {{"s", s}, {"t", t}});
  check("cross_entropy", [&] { return ops::cross_entropy(s, targets); }, {{"s", s}});

  for (std::size_t reparam : {std::size_t{0}, std::size_t{3}}) {
    ModelConfig mc;
    mc.n_layers = 2;
    mc.d_model = 8;
    mc.n_heads = 2;
    mc.vocab_size = 7;
    mc.max_seq_len = 6;
    mc.prefix_len = 2;
    mc.reparam_hidden = reparam;
    auto model = TransformerLM::init_global(mc, 9);
    for (auto* emb : {&model.tok_emb, &model.pos_emb}) {
      for (auto& v : emb->mutable_data()) v *= 25;
    }
    auto prompts = PromptSet::init_for(mc, 10, 0.5);
    TokenBatch tb{{1, 4, 2, 6, 0, 3, 3, 5, 1, 2}, 2, 5};
    const std::vector<std::int32_t> tgt{4, 2, 6, -1, 3, 3, 5, 1, 2, 0};
    auto params = model.named_parameters();
    for (auto& nt : prompts.named_parameters()) params.push_back(nt);
    check(fmt("model(reparam=%zu)", reparam), [&] { return ops::cross_entropy(model.forward(tb, &prompts).logits, tgt); },
          params);
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-6 && secs < 60,
          fmt("worst relative error %.2e at %s over %zu coordinates, %.1f s", worst, where.c_str(), coords, secs)};
}

Verdict aggregation_oracle() {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<int> kdist(1, 5);
  std::uniform_int_distribution<int> ndist(1, 500);
  double worst = 0;
  for (int c = 0; c < 100; ++c) {
    const int k = kdist(rng);
    std::vector<std::pair<PromptSet, double>> updates;
    for (int i = 0; i < k; ++i) updates.emplace_back(PromptSet::init_direct(3, 4, 8, rng(), 1.0), ndist(rng));
    const auto params = aggregate_prompts(updates).parameters();
    double total = 0;
    for (const auto& u : updates) total += u.second;
    for (std::size_t t = 0; t < params.size(); ++t) {
      for (std::size_t i = 0; i < params[t].numel(); ++i) {
        double expect = 0;
        for (const auto& u : updates) expect += u.second / total * u.first.parameters()[t].at(i);
        worst = std::max(worst, std::abs(params[t].at(i) - expect));
      }
    }
  }
  return {worst <= 1e-12, fmt("worst absolute deviation %.2e over 100 cases", worst)};
}

// Checksums every client phase and server optimization of the seed-0 fedsp
// run; also records the message schema for criterion 5.
struct RunAudit {
  std::size_t phase_checks = 0, phase_violations = 0;
  std::size_t server_checks = 0, server_violations = 0;
  std::size_t messages = 0, foreign_tensors = 0, wrong_sized_uploads = 0;
  std::map<std::uint32_t, std::uint64_t> prompts_at_start, model_after_alignment;
  std::uint64_t global_before_server = 0;
  std::set<std::string> prompt_names;
  std::size_t expected_payload = 0;

  RunHooks hooks() {
    RunHooks h;
    h.on_client_phase = [this](Phase ph, const ClientState& c) {
      if (ph == Phase::start) prompts_at_start[c.id] = digest(c.prompts);
      if (ph == Phase::after_alignment) {
        ++phase_checks;
        if (digest(c.prompts) != prompts_at_start[c.id]) ++phase_violations;
        model_after_alignment[c.id] = digest(c.model);
      }
      if (ph == Phase::after_capture) {
        ++phase_checks;
        if (digest(c.model) != model_after_alignment[c.id]) ++phase_violations;
      }
    };
    h.on_server_optimize = [this](bool after, const ServerState& s) {
      if (!after) {
        global_before_server = digest(s.global);
        return;
      }
      ++server_checks;
      if (digest(s.global) != global_before_server) ++server_violations;
    };
    h.on_message = [this](std::span<const std::uint8_t> wire) {
      const auto msg = RoundMessage::decode(wire);
      ++messages;
      for (const auto& nt : msg.payload) {
        if (!prompt_names.count(nt.name)) ++foreign_tensors;
      }
      if (msg.direction == RoundMessage::Direction::client_to_server && msg.payload_bytes() != expected_payload) {
        ++wrong_sized_uploads;
      }
    };
    return h;
  }
};

Verdict freeze_contracts(Env& e, RunAudit& audit, std::uint64_t teacher_before, std::uint64_t teacher_after) {
  const bool ok = audit.phase_checks > 0 && audit.phase_violations == 0 && audit.server_checks > 0 &&
                  audit.server_violations == 0 && teacher_before == teacher_after;
  (void)e;
  return {ok, fmt("%zu client phase checks (%zu violations), %zu server checks (%zu violations), teacher %s",
                  audit.phase_checks, audit.phase_violations, audit.server_checks, audit.server_violations,
                  teacher_before == teacher_after ? "unchanged" : "CHANGED")};
}

GlobalModel explicit_unroll(const AuxModel& aux, const GlobalModel& like) {
  auto g = like.clone();
  const auto order = aux.execution_order();
  for (std::size_t d = 0; d < order.size(); ++d) g.blocks()[d] = aux.blocks()[order[d]].clone();
  g.tok_emb = aux.tok_emb.clone();
  g.pos_emb = aux.pos_emb.clone();
  g.lnf_gain = aux.lnf_gain.clone();
  g.lnf_bias = aux.lnf_bias.clone();
  g.head_w = aux.head_w.clone();
  g.head_b = aux.head_b.clone();
  return g;
}

Verdict unroll_equivalence(const GlobalModel& global) {
  std::size_t equal = 0, total = 0;
  std::mt19937_64 rng(4);
  const auto& mc = global.config();
  std::uniform_int_distribution<std::int32_t> tok(0, static_cast<std::int32_t>(mc.vocab_size) - 1);
  std::uniform_int_distribution<std::size_t> len(1, mc.max_seq_len);
  for (std::size_t n : {std::size_t{1}, std::size_t{2}}) {
    auto aux = build_auxiliary(global, LayerSelection::bottom, n, true);
    // Perturb the copied blocks so the check does not rely on untouched weights.
    for (const auto& p : aux.block_parameters()) {
      for (auto& v : p.mutable_data()) v *= 1.25;
    }
    const auto unrolled = explicit_unroll(aux, global);
    const auto prompts = PromptSet::init_for(mc, 40 + n, 0.5);
    NoGradGuard no_grad;
    for (int i = 0; i < 50; ++i) {
      TokenBatch tb;
      tb.batch = 2;
      tb.seq = len(rng);
      for (std::size_t j = 0; j < tb.batch * tb.seq; ++j) tb.ids.push_back(tok(rng));
      const auto* p = i % 2 ? &prompts : nullptr;
      const auto a = aux.forward(tb, p), b = unrolled.forward(tb, p);
      equal += same_bits(a.hidden, b.hidden) && same_bits(a.logits, b.logits);
      ++total;
    }
  }
  return {equal == total, fmt("%zu / %zu forwards bitwise equal (N=1 R=8 and N=2 R=4)", equal, total)};
}

Verdict model_privacy(const RunAudit& audit, const RunResult& r, const RunConfig& cfg) {
  std::size_t bad_rounds = 0;
  std::uint64_t prev = 0;
  const auto size = r.metrics.summary.prompt_payload_bytes;
  for (const auto& rec : r.metrics.rounds) {
    if (rec.uploaded_bytes - prev != cfg.clients * size) ++bad_rounds;
    prev = rec.uploaded_bytes;
  }
  const double ratio = static_cast<double>(r.metrics.summary.prompt_payload_params) /
                       static_cast<double>(r.metrics.summary.global_params);
  const bool ok = audit.messages == 2 * cfg.rounds * cfg.clients && audit.foreign_tensors == 0 &&
                  audit.wrong_sized_uploads == 0 && bad_rounds == 0 && ratio < 0.05;
  return {ok, fmt("%zu messages, %zu non-prompt tensors, %zu mis-sized uploads, %zu rounds off by bytes; "
                  "payload %zu B/upload, payload/global params %.2f%%",
                  audit.messages, audit.foreign_tensors, audit.wrong_sized_uploads, bad_rounds, size, 100 * ratio)};
}

Verdict qualitative_ordering(Env& e) {
  const std::vector<std::string> modes{"fedsp", "fedprompt_single", "fedsp_no_kd", "fedsp_no_cs", "fedsp_no_at",
                                       "central_finetune"};
  std::map<std::string, std::vector<double>> acc;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    for (const auto& m : modes) acc[m].push_back(run(e, m, seed).metrics.summary.final_acc);
  }
  auto mean = [](const std::vector<double>& v) { return (v[0] + v[1] + v[2]) / 3.0; };
  std::string detail = "mean final acc:";
  for (const auto& m : modes) detail += fmt(" %s %.3f;", m.c_str(), mean(acc.at(m)));
  bool ok = mean(acc["fedsp"]) - mean(acc["fedprompt_single"]) >= 0.02;
  if (!ok) detail += " fedsp does not beat fedprompt_single by 2 points;";
  for (const char* ab : {"fedsp_no_kd", "fedsp_no_cs", "fedsp_no_at"}) {
    int worse = 0;
    for (int s = 0; s < 3; ++s) worse += acc[ab][s] < acc["fedsp"][s];
    if (mean(acc[ab]) > mean(acc["fedsp"]) || worse < 2) {
      ok = false;
      detail += fmt(" %s not below fedsp (worse on %d/3 seeds);", ab, worse);
    }
  }
  if (mean(acc["central_finetune"]) < mean(acc["fedsp"])) {
    ok = false;
    detail += " central_finetune below fedsp;";
  }
  return {ok, detail};
}

Verdict kd_effectiveness(const std::vector<double>& curve, Env& e) {
  const double ratio = curve[500] / curve[0];
  const double kd5 = run(e, "fedsp", 0).metrics.rounds.at(4).eval_acc;
  const double raw5 = run(e, "fedsp_no_kd", 0).metrics.rounds.at(4).eval_acc;
  return {ratio <= 0.5 && kd5 > raw5,
          fmt("KD loss %.4f -> %.4f at step 500 (ratio %.3f); round-5 acc fedsp %.3f vs fedsp_no_kd %.3f", curve[0],
              curve[500], ratio, kd5, raw5)};
}

int run_cli(const fs::path& bin, const std::string& args) {
  const std::string cmd = "\"" + bin.string() + "\" " + args + " > /dev/null";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Verdict selection_sweep(Env& e) {
  if (!fs::exists(e.fedsp_bin)) return {false, "fedsp binary not found at " + e.fedsp_bin.string()};
  auto cfg = e.base;
  cfg.rounds = 2;
  cfg.local_steps = 5;
  cfg.kd_steps = 100;
  cfg.aux_layers = 1;
  const auto cfg_path = e.work / "sweep_config.json";
  save_config(cfg_path, cfg);
  std::vector<fs::path> outs{e.work / "sweep_a", e.work / "sweep_b"};
  for (const auto& out : outs) {
    fs::remove_all(out);
    const int code = run_cli(e.fedsp_bin, "sweep --config \"" + cfg_path.string() +
                                              "\" --grid selection=BOT,MID,TOP --out \"" + out.string() + "\"");
    if (code != 0) return {false, fmt("sweep exited with %d", code)};
  }
  const auto report = slurp(outs[0] / "report.md");
  bool shaped = report.find("Layer selection") != std::string::npos;
  for (const char* s : {"| BOT |", "| MID |", "| TOP |"}) shaped = shaped && report.find(s) != std::string::npos;
  bool same = report == slurp(outs[1] / "report.md");
  for (const char* s : {"BOT", "MID", "TOP"}) {
    const auto sub = fs::path(std::string("selection=") + s) / "metrics.jsonl";
    same = same && fs::exists(outs[0] / sub) && slurp(outs[0] / sub) == slurp(outs[1] / sub);
  }
  return {shaped && same, fmt("report %s, repeated sweep %s (%s)", shaped ? "has BOT/MID/TOP rows" : "MALFORMED",
                              same ? "byte-identical" : "DIFFERS", (outs[0] / "report.md").c_str())};
}

Verdict determinism(Env& e, const GlobalModel& global) {
  const auto first = e.dirs.at({"fedsp", 0});
  auto cfg = run_config(e, "fedsp", 0, "_repeat");
  run_experiment(cfg);
  bool metrics_same = true;
  for (const char* f : {"metrics.jsonl", "summary.json", "prompts.fspt"}) {
    metrics_same = metrics_same && slurp(first / f) == slurp(fs::path(cfg.out) / f);
  }

  std::size_t checkpoints = 0, exact = 0;
  auto round_trip = [&](const std::vector<NamedTensor>& tensors, const std::string& name) {
    const auto path = e.work / ("roundtrip_" + name + ".fspt");
    save_tensors(path, tensors);
    const auto back = load_tensors(path);
    ++checkpoints;
    bool ok = back.size() == tensors.size();
    for (std::size_t i = 0; ok && i < back.size(); ++i) {
      ok = back[i].name == tensors[i].name && same_bits(back[i].tensor, tensors[i].tensor);
    }
    ok = ok && encode_tensors(back) == encode_tensors(tensors);
    exact += ok;
  };
  round_trip(global.checkpoint_tensors(), "global");
  const auto aux = load_aux(run_config(e, "fedsp", 0), global);
  round_trip(aux.checkpoint_tensors(), "aux");
  round_trip(e.results.at({"fedsp", 0}).prompts.named_parameters(), "prompts");
  auto reparam = PromptSet::init_reparam(8, 8, 64, 16, 3);
  round_trip(reparam.named_parameters(), "reparam_prompts");
  const auto reloaded = GlobalModel::from_checkpoint(load_tensors(e.base.global_checkpoint));
  const bool global_file_exact = encode_tensors(reloaded.checkpoint_tensors()) == encode_tensors(global.checkpoint_tensors());
  return {metrics_same && exact == checkpoints && global_file_exact,
          fmt("repeated fedsp run %s; %zu / %zu checkpoints round-trip bit-exactly", metrics_same ? "bitwise identical" : "DIFFERS",
              exact + global_file_exact, checkpoints + 1)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks for the federated soft-prompt simulator"};
  std::string work = "acceptance_work";
  std::string fedsp_bin = FEDSP_BIN;
  bool strict = false;
  app.add_option("--work", work, "Directory for cached models and run outputs");
  app.add_option("--fedsp", fedsp_bin, "Path to the fedsp command-line tool");
  app.add_flag("--strict", strict, "Exit nonzero when any criterion fails");
  CLI11_PARSE(app, argc, argv);

  const auto t0 = Clock::now();
  Env e;
  e.work = fs::absolute(work);
  e.fedsp_bin = fedsp_bin;
  fs::create_directories(e.work);
  e.base = base_config(e.work);

  std::map<int, Verdict> verdicts;
  auto record = [&](int id, const std::function<Verdict()>& fn) {
    try {
      verdicts[id] = fn();
    } catch (const std::exception& ex) {
      verdicts[id] = {false, std::string("error: ") + ex.what()};
    }
    std::printf("  [criterion %d evaluated]\n", id);
    std::fflush(stdout);
  };

  record(1, gradient_fidelity);
  record(2, aggregation_oracle);

  try {
    ensure_global(e);
  } catch (const std::exception& ex) {
    std::printf("fatal: cannot prepare the global model: %s\n", ex.what());
    return 1;
  }
  const auto tasks = tasks_for(e.base);
  const auto global = load_global(e.base, tasks.corpus.tokenizer);

  // KD on the default single-layer configuration, with the teacher checksummed.
  std::vector<double> kd_curve;
  std::uint64_t teacher_before = 0, teacher_after = 0;
  {
    auto cfg = e.base;
    cfg.aux_layers = 1;
    const auto part = partition_for(cfg, tasks.corpus);
    auto kd = cfg.kd_config();
    kd.steps = 500;
    teacher_before = digest(global);
    const auto res = run_kd(global, build_auxiliary(global, LayerSelection::bottom, 1, true), kd, tasks.corpus, part.proxy);
    teacher_after = digest(global);
    kd_curve = res.curve;
    write_kd_curve(e.work / "kd_curve_n1_500.csv", kd_curve);
  }

  RunAudit audit;
  for (const auto& nt : PromptSet::init_for(global.config(), 0).named_parameters()) audit.prompt_names.insert(nt.name);
  audit.expected_payload = encoded_size(PromptSet::init_for(global.config(), 0).named_parameters());
  std::optional<RunConfig> audited_cfg;
  record(3, [&] {
    audited_cfg = run_config(e, "fedsp", 0);
    run(e, "fedsp", 0, audit.hooks());
    return freeze_contracts(e, audit, teacher_before, teacher_after);
  });
  record(4, [&] { return unroll_equivalence(global); });
  record(5, [&] { return model_privacy(audit, e.results.at({"fedsp", 0}), *audited_cfg); });
  record(6, [&] { return qualitative_ordering(e); });
  record(7, [&] { return kd_effectiveness(kd_curve, e); });
  record(8, [&] { return selection_sweep(e); });
  record(9, [&] { return determinism(e, global); });

  std::printf("\n");
  int failures = 0;
  for (const auto& [id, v] : verdicts) {
    std::printf("criterion %d: %s  %s\n", id, v.pass ? "PASS" : "FAIL", v.detail.c_str());
    failures += !v.pass;
  }
  std::printf("\n%d / %zu criteria pass (%.0f s total)\n", static_cast<int>(verdicts.size()) - failures,
              verdicts.size(), seconds_since(t0));
  return strict && failures ? 1 : 0;
}
