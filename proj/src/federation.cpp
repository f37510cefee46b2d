#include "fedsp/federation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <exception>
#include <numeric>
#include <random>
#include <stdexcept>
#include <thread>

#include "fedsp/checkpoint.hpp"
#include "fedsp/ops.hpp"

namespace fedsp {

std::string to_string(TrainMode m) {
  switch (m) {
    case TrainMode::fedsp: return "fedsp";
    case TrainMode::fedsp_no_kd: return "fedsp_no_kd";
    case TrainMode::fedsp_no_cs: return "fedsp_no_cs";
    case TrainMode::fedsp_no_at: return "fedsp_no_at";
    case TrainMode::fedprompt: return "fedprompt";
    case TrainMode::fedprompt_single: return "fedprompt_single";
    case TrainMode::central_finetune: return "central_finetune";
    case TrainMode::central_prefix: return "central_prefix";
    case TrainMode::zero_shot: return "zero_shot";
  }
  return "?";
}

const std::vector<TrainMode>& all_modes() {
  static const std::vector<TrainMode> modes{
      TrainMode::zero_shot,   TrainMode::central_finetune, TrainMode::central_prefix,
      TrainMode::fedprompt,   TrainMode::fedprompt_single, TrainMode::fedsp,
      TrainMode::fedsp_no_kd, TrainMode::fedsp_no_cs,      TrainMode::fedsp_no_at,
  };
  return modes;
}

TrainMode parse_mode(const std::string& s) {
  for (auto m : all_modes()) {
    if (to_string(m) == s) return m;
  }
  throw std::invalid_argument("unknown mode '" + s + "'");
}

bool is_fedsp_family(TrainMode m) {
  return m == TrainMode::fedsp || m == TrainMode::fedsp_no_kd || m == TrainMode::fedsp_no_cs ||
         m == TrainMode::fedsp_no_at;
}

bool is_federated(TrainMode m) {
  return is_fedsp_family(m) || m == TrainMode::fedprompt || m == TrainMode::fedprompt_single;
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// ---------------------------------------------------------------------------
// RoundMessage

namespace {
constexpr char kMessageMagic[4] = {'F', 'S', 'P', 'M'};
}

RoundMessage RoundMessage::carrying(Direction direction, std::uint32_t round, std::uint32_t sender,
                                    const PromptSet& prompts) {
  RoundMessage m;
  m.direction = direction;
  m.round = round;
  m.sender = sender;
  m.payload = prompts.named_parameters();
  return m;
}

std::vector<std::uint8_t> RoundMessage::encode() const {
  auto body = encode_tensors(payload);
  std::vector<std::uint8_t> out;
  out.reserve(kHeaderBytes + body.size());
  out.insert(out.end(), std::begin(kMessageMagic), std::end(kMessageMagic));
  wire::put_u32(out, kVersion);
  wire::put_u32(out, static_cast<std::uint32_t>(direction));
  wire::put_u32(out, round);
  wire::put_u32(out, sender);
  wire::put_u64(out, body.size());
  out.insert(out.end(), body.begin(), body.end());
  return out;
}

RoundMessage RoundMessage::decode(std::span<const std::uint8_t> bytes) {
  wire::Reader in(bytes);
  auto magic = in.take(4);
  if (!std::equal(magic.begin(), magic.end(), std::begin(kMessageMagic))) throw FormatError("bad magic, expected FSPM");
  const auto version = in.u32();
  if (version != kVersion) throw FormatError("unsupported FSPM version " + std::to_string(version));
  RoundMessage m;
  const auto dir = in.u32();
  if (dir > 1) throw FormatError("bad message direction " + std::to_string(dir));
  m.direction = static_cast<Direction>(dir);
  m.round = in.u32();
  m.sender = in.u32();
  const auto len = in.u64();
  if (len != in.remaining()) {
    throw FormatError("payload length " + std::to_string(len) + " does not match " + std::to_string(in.remaining()) +
                      " remaining bytes");
  }
  m.payload = decode_tensors(in.take(static_cast<std::size_t>(len)));
  return m;
}

// ---------------------------------------------------------------------------
// Aggregation and sampling

PromptSet aggregate_prompts(const std::vector<std::pair<PromptSet, double>>& updates) {
  if (updates.empty()) throw std::invalid_argument("aggregate_prompts: no updates");
  double total = 0;
  for (const auto& [p, n] : updates) {
    if (!(n > 0)) throw std::invalid_argument("aggregate_prompts: data sizes must be positive");
    if (!p.same_shape(updates.front().first)) throw ShapeError("aggregate_prompts", "prompt sets differ in shape");
    total += n;
  }
  // sum_k w_k x_k written as x_0 + sum_{k>0} w_k (x_k - x_0): identical
  // inputs then reproduce themselves exactly.
  PromptSet out = updates.front().first.clone();
  const auto dst = out.parameters();
  const auto anchor = updates.front().first.parameters();
  for (std::size_t k = 1; k < updates.size(); ++k) {
    const double w = updates[k].second / total;
    const auto src = updates[k].first.parameters();
    for (std::size_t i = 0; i < dst.size(); ++i) {
      auto d = dst[i].mutable_data();
      auto s = src[i].data();
      auto a = anchor[i].data();
      for (std::size_t j = 0; j < d.size(); ++j) d[j] += w * (s[j] - a[j]);
    }
  }
  return out;
}

std::vector<std::uint32_t> sample_clients(std::size_t k_total, double fraction, std::uint64_t round_seed) {
  if (!(fraction > 0) || fraction > 1) throw std::invalid_argument("sample_clients: fraction must be in (0, 1]");
  std::vector<std::uint32_t> ids(k_total);
  std::iota(ids.begin(), ids.end(), 1u);
  if (fraction == 1.0) return ids;
  const auto n = std::min(k_total, static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(k_total))));
  std::mt19937_64 rng(round_seed);
  std::shuffle(ids.begin(), ids.end(), rng);
  ids.resize(n);
  std::sort(ids.begin(), ids.end());
  return ids;
}

// ---------------------------------------------------------------------------
// Client

namespace {

void copy_values(const PromptSet& dst, const PromptSet& src) {
  if (!dst.same_shape(src)) throw ShapeError("prompts", "received prompts do not match the local prompt shapes");
  const auto d = dst.parameters();
  const auto s = src.parameters();
  for (std::size_t i = 0; i < d.size(); ++i) std::copy(s[i].data().begin(), s[i].data().end(), d[i].mutable_data().begin());
}

/// Makes trainable exactly the prompt tensors the model consumes: in direct
/// form a model shallower than the prompt stack leaves the upper slots idle.
void enable_prompt_grads(const PromptSet& prompts, std::size_t consumed_depth) {
  prompts.set_requires_grad(true);
  if (prompts.reparametrized()) return;
  const auto params = prompts.parameters();  // key/value per layer, in order
  for (std::size_t l = consumed_depth; l < prompts.depth(); ++l) {
    params[2 * l].set_requires_grad(false);
    params[2 * l + 1].set_requires_grad(false);
  }
}

double lm_step(const TransformerLM& model, const PromptSet* prompts, const Corpus& corpus, BatchStream& stream,
               AdamW& opt, double lr) {
  const auto batch = make_lm_batch(corpus, stream.next());
  auto loss = ops::cross_entropy(model.forward(batch.inputs, prompts).logits, batch.targets);
  const double value = loss.item();
  backward(loss);
  opt.step(lr);
  return value;
}

}  // namespace

ClientState ClientState::create(std::uint32_t id, AuxModel model, std::vector<std::size_t> shard, const Corpus& corpus,
                                const PromptSet& prompt_template, const LocalConfig& config, std::uint64_t seed) {
  if (shard.empty()) throw std::invalid_argument("client " + std::to_string(id) + ": empty shard");
  ClientState cs;
  cs.id = id;
  cs.model = std::move(model);
  cs.shard = std::move(shard);
  cs.corpus = &corpus;
  cs.config = config;
  cs.seed = seed;
  cs.prompts = prompt_template.clone();
  cs.model.set_requires_grad(false);
  cs.prompts.set_requires_grad(false);
  cs.aux_opt.emplace(cs.model.parameters(), config.adamw);
  cs.prompt_opt.emplace(cs.prompts.parameters(), config.adamw);
  cs.stream.emplace(cs.shard, config.batch_size, seed);
  return cs;
}

PromptSet client_local_round(ClientState& cs, const PromptSet& prompts_in, std::size_t steps, TrainMode mode,
                             const PhaseObserver& observe) {
  if (cs.shard.empty() || !cs.stream) throw std::invalid_argument("client " + std::to_string(cs.id) + ": empty shard");
  if (steps < 1) throw std::invalid_argument("client_local_round: steps must be >= 1");
  if (prompts_in.depth() != cs.model.config().n_layers) {
    throw std::invalid_argument("client_local_round: prompt depth " + std::to_string(prompts_in.depth()) +
                                " does not match model depth " + std::to_string(cs.model.config().n_layers));
  }
  copy_values(cs.prompts, prompts_in);
  cs.last_losses.clear();
  if (observe) observe(Phase::start, cs);

  const LinearWarmupDecay aux_sched(cs.config.lr_aux, cs.config.total_steps, cs.config.warmup_fraction);
  const LinearWarmupDecay prompt_sched(cs.config.lr_prompt, cs.config.total_steps, cs.config.warmup_fraction);

  const bool alignment = mode == TrainMode::fedsp || mode == TrainMode::fedsp_no_kd || mode == TrainMode::fedsp_no_cs;
  if (alignment) {
    cs.prompts.set_requires_grad(false);
    cs.model.set_requires_grad(true);
    for (std::size_t s = 0; s < steps; ++s) {
      cs.last_losses.push_back(
          lm_step(cs.model, &cs.prompts, *cs.corpus, *cs.stream, *cs.aux_opt, aux_sched.lr(cs.aux_steps_done++)));
    }
    cs.model.set_requires_grad(false);
  }
  if (observe) observe(Phase::after_alignment, cs);

  cs.model.set_requires_grad(false);
  enable_prompt_grads(cs.prompts, cs.model.effective_depth());
  for (std::size_t s = 0; s < steps; ++s) {
    cs.last_losses.push_back(
        lm_step(cs.model, &cs.prompts, *cs.corpus, *cs.stream, *cs.prompt_opt, prompt_sched.lr(cs.prompt_steps_done++)));
  }
  cs.prompts.set_requires_grad(false);
  if (observe) observe(Phase::after_capture, cs);
  return cs.prompts.clone();
}

// ---------------------------------------------------------------------------
// Server

std::size_t ServerState::total_examples() const { return std::accumulate(client_sizes.begin(), client_sizes.end(), std::size_t{0}); }

PromptSet server_optimize(ServerState& ss, const PromptSet& prompts, std::size_t steps) {
  if (steps == 0) return prompts.clone();
  if (ss.proxy.empty() || !ss.corpus) throw std::invalid_argument("server_optimize: proxy shard is empty");
  if (!ss.opt || !ss.working.same_shape(prompts)) {
    ss.working = prompts.clone();
    ss.working.set_requires_grad(false);
    ss.opt.emplace(ss.working.parameters());
  } else {
    copy_values(ss.working, prompts);
  }
  if (!ss.stream) ss.stream.emplace(ss.proxy, ss.batch_size, ss.seed);
  if (!ss.schedule) ss.schedule.emplace(ss.lr, ss.total_steps ? ss.total_steps : steps, ss.warmup_fraction);

  ss.global.set_requires_grad(false);
  ss.working.set_requires_grad(true);
  for (std::size_t s = 0; s < steps; ++s) {
    lm_step(ss.global, &ss.working, *ss.corpus, *ss.stream, *ss.opt, ss.schedule->lr(ss.steps_done++));
  }
  ss.working.set_requires_grad(false);
  return ss.working.clone();
}

// ---------------------------------------------------------------------------
// Run loop

std::size_t FedConfig::effective_server_steps() const {
  if (mode == TrainMode::fedprompt || mode == TrainMode::fedprompt_single) return 0;
  return server_steps.value_or(local_steps);
}

void FedConfig::validate(const ModelConfig& model) const {
  model.validate();
  if (rounds < 1) throw std::invalid_argument("rounds must be >= 1");
  if (local_steps < 1) throw std::invalid_argument("local_steps must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (!(client_fraction > 0) || client_fraction > 1) throw std::invalid_argument("client_fraction must be in (0, 1]");
  if (!(warmup_fraction >= 0) || warmup_fraction > 1) throw std::invalid_argument("warmup_fraction must be in [0, 1]");
  for (double lr : {lr_aux, lr_prompt, lr_server}) {
    if (!(lr >= 0) || !std::isfinite(lr)) throw std::invalid_argument("learning rates must be finite and >= 0");
  }
  if (is_fedsp_family(mode)) {
    if (aux_layers < 1 || aux_layers > model.n_layers) {
      throw std::invalid_argument("aux_layers must be in [1, " + std::to_string(model.n_layers) + "]");
    }
    if (model.n_layers % aux_layers != 0) {
      throw std::invalid_argument("aux_layers " + std::to_string(aux_layers) + " does not divide n_layers " +
                                  std::to_string(model.n_layers));
    }
    if (mode != TrainMode::fedsp_no_kd && (kd.steps < 1 || !(kd.lr > 0))) {
      throw std::invalid_argument("kd needs steps >= 1 and lr > 0");
    }
  }
}

AuxModel initial_client_model(const FedConfig& cfg, const FedEnvironment& env, std::vector<double>* kd_curve) {
  const auto& global = *env.global;
  switch (cfg.mode) {
    case TrainMode::fedprompt: return global.clone();
    case TrainMode::fedprompt_single: return build_auxiliary(global, LayerSelection::bottom, 1, false);
    case TrainMode::fedsp_no_kd: return build_auxiliary(global, cfg.selection, cfg.aux_layers, true);
    case TrainMode::fedsp:
    case TrainMode::fedsp_no_cs:
    case TrainMode::fedsp_no_at: {
      const bool sharing = cfg.mode != TrainMode::fedsp_no_cs;
      if (env.distilled_aux) {
        const auto& a = *env.distilled_aux;
        const auto& info = a.aux_info();
        if (!info || info->cross_layer_sharing != sharing || a.n_blocks() != cfg.aux_layers ||
            !(a.config() == global.config())) {
          throw std::invalid_argument("distilled auxiliary model does not match the run configuration");
        }
        return a.clone();
      }
      auto raw = build_auxiliary(global, cfg.selection, cfg.aux_layers, sharing);
      auto kd = run_kd(global, raw, cfg.kd, *env.corpus, env.partition->proxy);
      if (kd_curve) *kd_curve = kd.curve;
      return std::move(kd.aux);
    }
    default: break;
  }
  throw std::invalid_argument("mode " + to_string(cfg.mode) + " has no client model");
}

namespace {

class Stopwatch {
 public:
  explicit Stopwatch(bool enabled) : enabled_(enabled), start_(std::chrono::steady_clock::now()) {}
  double ms() const {
    if (!enabled_) return 0.0;
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  bool enabled_;
  std::chrono::steady_clock::time_point start_;
};

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

void finish_summary(RunMetrics& m, TrainMode mode, const ModelConfig& mc, std::size_t aux_layers) {
  auto& s = m.summary;
  s.mode = mode;
  s.global_params = count_params(ParamKind::global_model, mc);
  s.aux_params = count_params(ParamKind::aux_model, mc, aux_layers);
  s.prompt_payload_params = count_params(ParamKind::prompt_payload, mc);
  if (!m.rounds.empty()) {
    s.final_acc = m.rounds.back().eval_acc;
    s.total_uploaded_bytes = m.rounds.back().uploaded_bytes;
    s.total_downloaded_bytes = m.rounds.back().downloaded_bytes;
    for (const auto& r : m.rounds) {
      if (r.eval_acc > s.best_acc || s.best_round == 0) {
        s.best_acc = r.eval_acc;
        s.best_round = r.round;
      }
    }
  }
}

std::vector<std::size_t> all_train_docs(const Partition& p) {
  std::vector<std::size_t> docs = p.proxy;
  for (const auto& c : p.clients) docs.insert(docs.end(), c.begin(), c.end());
  std::sort(docs.begin(), docs.end());
  return docs;
}

RunResult run_central(const FedConfig& cfg, const FedEnvironment& env) {
  const auto& global = *env.global;
  RunResult out;
  const auto& mc = global.config();
  out.prompts = PromptSet::init_for(mc, derive_seed(cfg.seed, 1), cfg.prompt_init_std);
  out.prompts.set_requires_grad(false);
  Stopwatch clock(cfg.record_wall_time);

  if (cfg.mode == TrainMode::zero_shot) {
    RoundRecord r;
    r.round = 1;
    r.eval_acc = mc_accuracy(global, nullptr, env.corpus->tokenizer, env.probes);
    r.wall_ms = clock.ms();
    out.metrics.rounds.push_back(r);
    finish_summary(out.metrics, cfg.mode, mc, cfg.aux_layers);
    out.metrics.summary.prompt_payload_params = 0;
    return out;
  }

  const bool finetune = cfg.mode == TrainMode::central_finetune;
  auto model = global.clone();
  model.set_requires_grad(finetune);
  if (!finetune) out.prompts.set_requires_grad(true);
  AdamW opt(finetune ? model.parameters() : out.prompts.parameters());
  const std::size_t total = cfg.rounds * cfg.local_steps;
  LinearWarmupDecay sched(finetune ? cfg.lr_aux : cfg.lr_prompt, total, cfg.warmup_fraction);
  BatchStream stream(all_train_docs(*env.partition), cfg.batch_size, derive_seed(cfg.seed, 2));
  const PromptSet* prompts = finetune ? nullptr : &out.prompts;

  std::size_t step = 0;
  for (std::size_t round = 1; round <= cfg.rounds; ++round) {
    std::vector<double> losses;
    for (std::size_t s = 0; s < cfg.local_steps; ++s) {
      losses.push_back(lm_step(model, prompts, *env.corpus, stream, opt, sched.lr(step++)));
    }
    RoundRecord r;
    r.round = round;
    r.train_loss_mean = mean_of(losses);
    r.eval_acc = mc_accuracy(model, prompts, env.corpus->tokenizer, env.probes);
    r.wall_ms = clock.ms();
    out.metrics.rounds.push_back(r);
  }
  model.set_requires_grad(false);
  out.prompts.set_requires_grad(false);
  finish_summary(out.metrics, cfg.mode, mc, cfg.aux_layers);
  if (finetune) {
    out.metrics.summary.prompt_payload_params = 0;
    out.finetuned = std::move(model);
  }
  return out;
}

}  // namespace

RunResult run_federation(const FedConfig& cfg, const FedEnvironment& env, const RunHooks& hooks) {
  if (!env.global || !env.corpus || !env.partition) throw std::invalid_argument("run_federation: incomplete environment");
  if (env.probes.empty()) throw std::invalid_argument("run_federation: no evaluation examples");
  const auto& global = *env.global;
  const auto& mc = global.config();
  cfg.validate(mc);
  const auto& part = *env.partition;
  if (part.clients.empty()) throw std::invalid_argument("run_federation: partition has no clients");
  if (!is_federated(cfg.mode)) return run_central(cfg, env);

  Stopwatch clock(cfg.record_wall_time);
  RunResult out;
  auto client_model = initial_client_model(cfg, env, &out.kd_curve);
  client_model.set_requires_grad(false);

  PromptSet prompts = PromptSet::init_for(mc, derive_seed(cfg.seed, 1), cfg.prompt_init_std);
  prompts.set_requires_grad(false);

  LocalConfig local;
  local.batch_size = cfg.batch_size;
  local.lr_aux = cfg.lr_aux;
  local.lr_prompt = cfg.lr_prompt;
  local.warmup_fraction = cfg.warmup_fraction;
  local.total_steps = cfg.rounds * cfg.local_steps;

  std::vector<ClientState> clients;
  clients.reserve(part.clients.size());
  for (std::size_t k = 0; k < part.clients.size(); ++k) {
    const auto id = static_cast<std::uint32_t>(k + 1);
    clients.push_back(ClientState::create(id, client_model.clone(), part.clients[k], *env.corpus, prompts, local,
                                          derive_seed(cfg.seed, 100 + id)));
  }

  ServerState server;
  server.global = global.clone();
  server.global.set_requires_grad(false);
  server.prompts = prompts.clone();
  server.proxy = part.proxy;
  server.corpus = env.corpus;
  server.batch_size = cfg.batch_size;
  for (const auto& c : part.clients) server.client_sizes.push_back(c.size());
  const std::size_t server_steps = cfg.effective_server_steps();
  server.lr = cfg.lr_server;
  server.warmup_fraction = cfg.warmup_fraction;
  server.total_steps = cfg.rounds * server_steps;
  server.seed = derive_seed(cfg.seed, 3);

  std::uint64_t uploaded = 0, downloaded = 0;
  auto transmit = [&](const RoundMessage& msg) {
    const auto wire = msg.encode();
    if (hooks.on_message) hooks.on_message(wire);
    auto received = RoundMessage::decode(wire);
    const auto bytes = received.payload_bytes();
    (msg.direction == RoundMessage::Direction::client_to_server ? uploaded : downloaded) += bytes;
    return PromptSet::from_named(received.payload);
  };

  for (std::size_t round = 1; round <= cfg.rounds; ++round) {
    server.round = static_cast<std::uint32_t>(round);
    const auto selected = sample_clients(clients.size(), cfg.client_fraction, derive_seed(cfg.seed, 1000 + round));

    std::vector<PromptSet> inbound;
    for (auto id : selected) {
      inbound.push_back(transmit(
          RoundMessage::carrying(RoundMessage::Direction::server_to_client, server.round, 0, server.prompts)));
      (void)id;
    }

    std::vector<PromptSet> results(selected.size());
    auto work = [&](std::size_t i) {
      results[i] = client_local_round(clients[selected[i] - 1], inbound[i], cfg.local_steps, cfg.mode,
                                      hooks.on_client_phase);
    };
    if (cfg.parallel_clients && selected.size() > 1) {
      std::vector<std::exception_ptr> errors(selected.size());
      std::vector<std::thread> threads;
      for (std::size_t i = 0; i < selected.size(); ++i) {
        threads.emplace_back([&, i] {
          try {
            work(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        });
      }
      for (auto& t : threads) t.join();
      for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
      }
    } else {
      for (std::size_t i = 0; i < selected.size(); ++i) work(i);
    }

    std::vector<std::pair<PromptSet, double>> updates;
    std::vector<double> losses;
    for (std::size_t i = 0; i < selected.size(); ++i) {
      const auto& cs = clients[selected[i] - 1];
      updates.emplace_back(transmit(RoundMessage::carrying(RoundMessage::Direction::client_to_server, server.round,
                                                           cs.id, results[i])),
                           static_cast<double>(cs.shard.size()));
      losses.insert(losses.end(), cs.last_losses.begin(), cs.last_losses.end());
    }
    auto aggregated = aggregate_prompts(updates);

    if (hooks.on_server_optimize) hooks.on_server_optimize(false, server);
    server.prompts = server_optimize(server, aggregated, server_steps);
    if (hooks.on_server_optimize) hooks.on_server_optimize(true, server);

    RoundRecord r;
    r.round = round;
    r.train_loss_mean = mean_of(losses);
    r.eval_acc = mc_accuracy(server.global, &server.prompts, env.corpus->tokenizer, env.probes);
    r.uploaded_bytes = uploaded;
    r.downloaded_bytes = downloaded;
    r.wall_ms = clock.ms();
    out.metrics.rounds.push_back(r);
  }

  finish_summary(out.metrics, cfg.mode, mc, cfg.aux_layers);
  out.metrics.summary.prompt_payload_bytes = encoded_size(server.prompts.named_parameters());
  out.prompts = server.prompts.clone();
  out.aux = std::move(client_model);
  return out;
}

}  // namespace fedsp
