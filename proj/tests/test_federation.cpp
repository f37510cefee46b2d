#include <gtest/gtest.h>

#include <cstring>
#include <random>
#include <map>
#include <set>

#include "fedsp/federation.hpp"
#include "fedsp/ops.hpp"

using namespace fedsp;

namespace {

bool bitwise_equal(const PromptSet& a, const PromptSet& b) {
  const auto pa = a.parameters(), pb = b.parameters();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (pa[i].shape() != pb[i].shape()) return false;
    if (std::memcmp(pa[i].data().data(), pb[i].data().data(), 8 * pa[i].numel()) != 0) return false;
  }
  return true;
}

std::uint64_t digest(const PromptSet& p) { return checksum(p.named_parameters()); }
std::uint64_t digest(const TransformerLM& m) { return checksum(m.named_parameters()); }

PromptSet scalar_set(double key, double value) {
  return PromptSet::from_layers({{Tensor::from({1, 1}, {key}), Tensor::from({1, 1}, {value})}});
}

PromptSet random_set(std::mt19937_64& rng, std::size_t depth, std::size_t p, std::size_t d) {
  return PromptSet::init_direct(depth, p, d, rng(), 1.0);
}

struct World {
  ToyTasks tasks;
  ModelConfig config;
  GlobalModel global;
  Partition part;
  std::vector<McExample> probes;
};

World make_world(std::size_t layers = 4, std::size_t clients = 3) {
  ToyTaskOptions o;
  o.pretrain_docs = 100;
  World w{make_toy_tasks(0, o), {}, {}, {}, {}};
  w.config.n_layers = layers;
  w.config.d_model = 8;
  w.config.n_heads = 2;
  w.config.vocab_size = w.tasks.corpus.tokenizer.vocab_size();
  w.config.max_seq_len = 8;
  w.config.prefix_len = 2;
  w.global = TransformerLM::init_global(w.config, 1);
  w.global.set_requires_grad(false);
  w.part = partition(w.tasks.corpus, clients, PartitionScheme::iid, 0);
  w.probes.assign(w.tasks.probes.begin(), w.tasks.probes.begin() + 20);
  return w;
}

FedEnvironment env_of(const World& w, const AuxModel* aux = nullptr) {
  FedEnvironment env;
  env.global = &w.global;
  env.corpus = &w.tasks.corpus;
  env.probes = w.probes;
  env.partition = &w.part;
  env.distilled_aux = aux;
  return env;
}

FedConfig small_fed(TrainMode mode) {
  FedConfig c;
  c.mode = mode;
  c.rounds = 2;
  c.local_steps = 2;
  c.lr_aux = 1e-2;
  c.lr_prompt = 1e-2;
  c.lr_server = 1e-2;
  c.kd.steps = 3;
  return c;
}

ClientState make_client(const World& w, const AuxModel& model, double lr = 1e-2) {
  LocalConfig lc;
  lc.lr_aux = lr;
  lc.lr_prompt = lr;
  lc.total_steps = 10;
  return ClientState::create(1, model.clone(), w.part.clients[0], w.tasks.corpus,
                             PromptSet::init_for(w.config, 5), lc, 9);
}

double proxy_loss(const World& w, const PromptSet& prompts) {
  NoGradGuard no_grad;
  const auto batch = make_lm_batch(w.tasks.corpus, w.part.proxy);
  return ops::cross_entropy(w.global.forward(batch.inputs, &prompts).logits, batch.targets).item();
}

}  // namespace

// ---------------------------------------------------------------------------
// Aggregation

TEST(Aggregate, ScalarWeightedMean) {
  const auto out = aggregate_prompts({{scalar_set(0, 0), 1.0}, {scalar_set(4, 4), 3.0}});
  EXPECT_EQ(out.parameters()[0].item(), 3.0);
  EXPECT_EQ(out.parameters()[1].item(), 3.0);
}

TEST(Aggregate, IdenticalSetsAreAFixedPoint) {
  std::mt19937_64 rng(1);
  const auto p = random_set(rng, 3, 2, 4);
  std::vector<std::pair<PromptSet, double>> updates;
  for (double wt : {1.0, 7.0, 0.3, 11.0}) updates.emplace_back(p.clone(), wt);
  EXPECT_TRUE(bitwise_equal(aggregate_prompts(updates), p));
}

TEST(Aggregate, MatchesScalarLoopOracle) {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<int> kdist(1, 5);
  std::uniform_real_distribution<double> wdist(1.0, 100.0);
  double worst = 0;
  for (int c = 0; c < 100; ++c) {
    const int k = kdist(rng);
    std::vector<std::pair<PromptSet, double>> updates;
    for (int i = 0; i < k; ++i) updates.emplace_back(random_set(rng, 2, 3, 4), std::floor(wdist(rng)));
    const auto out = aggregate_prompts(updates);
    double total = 0;
    for (const auto& u : updates) total += u.second;
    const auto params = out.parameters();
    for (std::size_t t = 0; t < params.size(); ++t) {
      for (std::size_t e = 0; e < params[t].numel(); ++e) {
        double expect = 0;
        for (const auto& u : updates) expect += (u.second / total) * u.first.parameters()[t].at(e);
        worst = std::max(worst, std::abs(params[t].at(e) - expect));
      }
    }
  }
  EXPECT_LE(worst, 1e-12);
}

TEST(Aggregate, LinearInScale) {
  std::mt19937_64 rng(3);
  const double alpha = -2.5;
  std::vector<std::pair<PromptSet, double>> plain, scaled;
  for (int i = 0; i < 4; ++i) {
    auto p = random_set(rng, 2, 2, 3);
    auto q = p.clone();
    for (const auto& t : q.parameters()) {
      for (auto& v : t.mutable_data()) v *= alpha;
    }
    const double wt = 1.0 + i;
    plain.emplace_back(std::move(p), wt);
    scaled.emplace_back(std::move(q), wt);
  }
  const auto a = aggregate_prompts(plain).parameters();
  const auto b = aggregate_prompts(scaled).parameters();
  for (std::size_t t = 0; t < a.size(); ++t) {
    for (std::size_t e = 0; e < a[t].numel(); ++e) EXPECT_NEAR(b[t].at(e), alpha * a[t].at(e), 1e-12);
  }
}

TEST(Aggregate, RejectsBadInput) {
  EXPECT_THROW(aggregate_prompts({}), std::invalid_argument);
  std::mt19937_64 rng(4);
  std::vector<std::pair<PromptSet, double>> mismatched;
  mismatched.emplace_back(random_set(rng, 2, 2, 3), 1.0);
  mismatched.emplace_back(random_set(rng, 2, 3, 3), 1.0);
  EXPECT_ANY_THROW(aggregate_prompts(mismatched));
  std::vector<std::pair<PromptSet, double>> zero_weight;
  zero_weight.emplace_back(random_set(rng, 2, 2, 3), 0.0);
  EXPECT_ANY_THROW(aggregate_prompts(zero_weight));
}

// ---------------------------------------------------------------------------
// Client local round

TEST(ClientRound, PhasesRespectFreezeContracts) {
  auto w = make_world();
  auto cs = make_client(w, build_auxiliary(w.global, LayerSelection::bottom, 1));
  const auto in = PromptSet::init_for(w.config, 6);
  std::uint64_t prompts_start = 0, prompts_aligned = 0, model_start = 0, model_aligned = 0, model_captured = 0;
  const auto out = client_local_round(cs, in, 3, TrainMode::fedsp, [&](Phase ph, const ClientState& c) {
    switch (ph) {
      case Phase::start: prompts_start = digest(c.prompts); model_start = digest(c.model); break;
      case Phase::after_alignment: prompts_aligned = digest(c.prompts); model_aligned = digest(c.model); break;
      case Phase::after_capture: model_captured = digest(c.model); break;
    }
  });
  EXPECT_EQ(prompts_start, digest(in));
  EXPECT_EQ(prompts_aligned, prompts_start);
  EXPECT_NE(model_aligned, model_start);
  EXPECT_EQ(model_captured, model_aligned);
  EXPECT_NE(digest(out), digest(in));
  EXPECT_EQ(cs.last_losses.size(), 6u);
}

TEST(ClientRound, NoAlignmentLeavesModelUntouched) {
  auto w = make_world();
  auto cs = make_client(w, build_auxiliary(w.global, LayerSelection::bottom, 1));
  const auto before = digest(cs.model);
  client_local_round(cs, PromptSet::init_for(w.config, 6), 3, TrainMode::fedsp_no_at);
  EXPECT_EQ(digest(cs.model), before);
  EXPECT_EQ(cs.last_losses.size(), 3u);
}

TEST(ClientRound, ZeroLearningRateIsANullUpdate) {
  auto w = make_world();
  auto cs = make_client(w, build_auxiliary(w.global, LayerSelection::bottom, 1), 0.0);
  const auto in = PromptSet::init_for(w.config, 6);
  const auto model_before = digest(cs.model);
  const auto out = client_local_round(cs, in, 1, TrainMode::fedsp);
  EXPECT_TRUE(bitwise_equal(out, in));
  EXPECT_EQ(digest(cs.model), model_before);
}

TEST(ClientRound, NoSharingTrainsOnlyConsumedSlots) {
  auto w = make_world();
  auto cs = make_client(w, build_auxiliary(w.global, LayerSelection::bottom, 1, false));
  const auto in = PromptSet::init_for(w.config, 6);
  const auto out = client_local_round(cs, in, 2, TrainMode::fedsp_no_cs);
  const auto a = in.materialize(), b = out.materialize();
  EXPECT_NE(checksum(std::vector<NamedTensor>{{"k", a[0].key}}), checksum(std::vector<NamedTensor>{{"k", b[0].key}}));
  for (std::size_t l = 1; l < a.size(); ++l) {
    EXPECT_EQ(std::memcmp(a[l].key.data().data(), b[l].key.data().data(), 8 * a[l].key.numel()), 0);
    EXPECT_EQ(std::memcmp(a[l].value.data().data(), b[l].value.data().data(), 8 * a[l].value.numel()), 0);
  }
}

TEST(ClientRound, RejectsBadInput) {
  auto w = make_world();
  auto cs = make_client(w, build_auxiliary(w.global, LayerSelection::bottom, 1));
  EXPECT_THROW(client_local_round(cs, PromptSet::init_for(w.config, 6), 0, TrainMode::fedsp), std::invalid_argument);
  EXPECT_THROW(client_local_round(cs, PromptSet::init_direct(2, 2, 8, 1), 1, TrainMode::fedsp), std::invalid_argument);
  LocalConfig lc;
  EXPECT_THROW(ClientState::create(1, w.global.clone(), {}, w.tasks.corpus, PromptSet::init_for(w.config, 1), lc, 0),
               std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Server

ServerState make_server(const World& w) {
  ServerState ss;
  ss.global = w.global.clone();
  ss.proxy = w.part.proxy;
  ss.corpus = &w.tasks.corpus;
  ss.lr = 1e-2;
  ss.seed = 3;
  return ss;
}

TEST(ServerOptimize, ZeroStepsIsIdentity) {
  auto w = make_world();
  auto ss = make_server(w);
  const auto p = PromptSet::init_for(w.config, 2);
  EXPECT_TRUE(bitwise_equal(server_optimize(ss, p, 0), p));
}

TEST(ServerOptimize, DescendsAndLeavesGlobalUnchanged) {
  auto w = make_world();
  auto ss = make_server(w);
  const auto global_before = digest(ss.global);
  const auto p = PromptSet::init_for(w.config, 2);
  const auto out = server_optimize(ss, p, 20);
  EXPECT_EQ(digest(ss.global), global_before);
  EXPECT_EQ(digest(w.global), global_before);
  EXPECT_LT(proxy_loss(w, out), proxy_loss(w, p));
}

TEST(ServerOptimize, EmptyProxyThrows) {
  auto w = make_world();
  auto ss = make_server(w);
  ss.proxy.clear();
  EXPECT_THROW(server_optimize(ss, PromptSet::init_for(w.config, 2), 1), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Client sampling

TEST(SampleClients, FullParticipationIsOrdered) {
  const auto ids = sample_clients(10, 1.0, 42);
  EXPECT_EQ(ids, (std::vector<std::uint32_t>{1, 2, 3, 4, 5, 6, 7, 8, 9, 10}));
}

TEST(SampleClients, DeterministicDistinctAndInRange) {
  EXPECT_EQ(sample_clients(10, 0.5, 9), sample_clients(10, 0.5, 9));
  std::set<std::vector<std::uint32_t>> seen;
  for (std::uint64_t s = 0; s < 100; ++s) {
    const auto ids = sample_clients(10, 0.5, s);
    ASSERT_EQ(ids.size(), 5u);
    EXPECT_EQ(std::set<std::uint32_t>(ids.begin(), ids.end()).size(), 5u);
    for (auto id : ids) EXPECT_TRUE(id >= 1 && id <= 10);
    seen.insert(ids);
  }
  EXPECT_GT(seen.size(), 1u);
  EXPECT_EQ(sample_clients(10, 0.01, 1).size(), 1u);
  EXPECT_EQ(sample_clients(7, 0.5, 1).size(), 4u);
}

// ---------------------------------------------------------------------------
// Wire format

TEST(RoundMessage, EncodeDecodeRoundTrip) {
  const auto p = PromptSet::init_direct(2, 3, 4, 1);
  const auto msg = RoundMessage::carrying(RoundMessage::Direction::client_to_server, 7, 3, p);
  const auto wire = msg.encode();
  EXPECT_EQ(wire.size(), RoundMessage::kHeaderBytes + msg.payload_bytes());
  EXPECT_EQ(std::memcmp(wire.data(), "FSPM", 4), 0);
  const auto back = RoundMessage::decode(wire);
  EXPECT_EQ(back.direction, RoundMessage::Direction::client_to_server);
  EXPECT_EQ(back.round, 7u);
  EXPECT_EQ(back.sender, 3u);
  EXPECT_TRUE(bitwise_equal(PromptSet::from_named(back.payload), p));
  EXPECT_EQ(back.encode(), wire);
}

TEST(RoundMessage, CorruptInputThrows) {
  auto wire = RoundMessage::carrying(RoundMessage::Direction::server_to_client, 1, 0, PromptSet::init_direct(1, 1, 2, 1))
                  .encode();
  auto bad = wire;
  bad[0] = 'X';
  EXPECT_THROW(RoundMessage::decode(bad), FormatError);
  auto truncated = wire;
  truncated.pop_back();
  EXPECT_THROW(RoundMessage::decode(truncated), FormatError);
  auto extended = wire;
  extended.push_back(0);
  EXPECT_THROW(RoundMessage::decode(extended), FormatError);
}

// ---------------------------------------------------------------------------
// Full runs

TEST(RunFederation, NullRoundAccountsTwoPayloads) {
  auto w = make_world(4, 1);
  auto cfg = small_fed(TrainMode::fedsp_no_kd);
  cfg.rounds = 1;
  cfg.lr_aux = cfg.lr_prompt = cfg.lr_server = 0;
  const auto r = run_federation(cfg, env_of(w));
  const auto initial = PromptSet::init_for(w.config, derive_seed(cfg.seed, 1), cfg.prompt_init_std);
  EXPECT_TRUE(bitwise_equal(r.prompts, initial));
  const auto size = encoded_size(initial.named_parameters());
  const auto& last = r.metrics.rounds.back();
  EXPECT_EQ(last.uploaded_bytes + last.downloaded_bytes, 2 * size);
  EXPECT_EQ(last.uploaded_bytes, size);
}

TEST(RunFederation, MessagesCarryOnlyPrompts) {
  auto w = make_world();
  auto cfg = small_fed(TrainMode::fedsp);
  const auto prompt_names = [&] {
    std::set<std::string> s;
    for (const auto& nt : PromptSet::init_for(w.config, 0).named_parameters()) s.insert(nt.name);
    return s;
  }();
  std::set<std::string> model_names;
  for (const auto& nt : w.global.named_parameters()) model_names.insert(nt.name);

  std::size_t messages = 0, payload_params = 0;
  RunHooks hooks;
  hooks.on_message = [&](std::span<const std::uint8_t> wire) {
    const auto msg = RoundMessage::decode(wire);
    std::set<std::string> names;
    std::size_t params = 0;
    for (const auto& nt : msg.payload) {
      EXPECT_TRUE(prompt_names.count(nt.name)) << nt.name;
      EXPECT_FALSE(model_names.count(nt.name)) << nt.name;
      names.insert(nt.name);
      params += nt.tensor.numel();
    }
    EXPECT_EQ(names, prompt_names);
    payload_params = params;
    ++messages;
  };
  const auto r = run_federation(cfg, env_of(w), hooks);
  EXPECT_EQ(messages, 2 * cfg.rounds * w.part.clients.size());
  EXPECT_EQ(payload_params, count_params(ParamKind::prompt_payload, w.config));

  const auto size = encoded_size(r.prompts.named_parameters());
  EXPECT_EQ(r.metrics.summary.prompt_payload_bytes, size);
  for (const auto& rec : r.metrics.rounds) {
    EXPECT_EQ(rec.uploaded_bytes, rec.round * w.part.clients.size() * size);
    EXPECT_EQ(rec.downloaded_bytes, rec.uploaded_bytes);
  }
}

TEST(RunFederation, FreezeContractsHoldEndToEnd) {
  auto w = make_world();
  auto cfg = small_fed(TrainMode::fedsp);
  const auto global_before = digest(w.global);
  std::map<std::uint32_t, std::uint64_t> prompt_at_start, model_after_alignment;
  std::size_t checked = 0;
  std::uint64_t server_global = 0;
  RunHooks hooks;
  hooks.on_client_phase = [&](Phase ph, const ClientState& c) {
    if (ph == Phase::start) prompt_at_start[c.id] = digest(c.prompts);
    if (ph == Phase::after_alignment) {
      EXPECT_EQ(digest(c.prompts), prompt_at_start[c.id]);
      model_after_alignment[c.id] = digest(c.model);
    }
    if (ph == Phase::after_capture) {
      EXPECT_EQ(digest(c.model), model_after_alignment[c.id]);
      ++checked;
    }
  };
  hooks.on_server_optimize = [&](bool after, const ServerState& s) {
    if (!after) server_global = digest(s.global);
    else EXPECT_EQ(digest(s.global), server_global);
  };
  const auto r = run_federation(cfg, env_of(w), hooks);
  EXPECT_EQ(checked, cfg.rounds * w.part.clients.size());
  EXPECT_EQ(server_global, global_before);
  EXPECT_EQ(digest(w.global), global_before);
  EXPECT_EQ(r.kd_curve.size(), cfg.kd.steps + 1);
}

TEST(RunFederation, ParallelClientsMatchSequential) {
  auto w = make_world();
  auto cfg = small_fed(TrainMode::fedsp_no_kd);
  const auto seq = run_federation(cfg, env_of(w));
  cfg.parallel_clients = true;
  const auto par = run_federation(cfg, env_of(w));
  EXPECT_TRUE(bitwise_equal(seq.prompts, par.prompts));
  for (std::size_t i = 0; i < seq.metrics.rounds.size(); ++i) {
    EXPECT_EQ(seq.metrics.rounds[i].eval_acc, par.metrics.rounds[i].eval_acc);
    EXPECT_EQ(*seq.metrics.rounds[i].train_loss_mean, *par.metrics.rounds[i].train_loss_mean);
  }
}

TEST(RunFederation, Deterministic) {
  auto w = make_world();
  const auto cfg = small_fed(TrainMode::fedsp);
  const auto a = run_federation(cfg, env_of(w));
  const auto b = run_federation(cfg, env_of(w));
  EXPECT_TRUE(bitwise_equal(a.prompts, b.prompts));
  EXPECT_EQ(a.kd_curve, b.kd_curve);
}

TEST(RunFederation, IndivisibleAuxDepthFailsBeforeTraining) {
  auto w = make_world();
  auto cfg = small_fed(TrainMode::fedsp);
  cfg.aux_layers = 3;
  std::size_t messages = 0;
  RunHooks hooks;
  hooks.on_message = [&](std::span<const std::uint8_t>) { ++messages; };
  EXPECT_THROW(run_federation(cfg, env_of(w), hooks), std::invalid_argument);
  EXPECT_EQ(messages, 0u);
}

TEST(RunFederation, BaselinesSkipServerOptimization) {
  EXPECT_EQ(small_fed(TrainMode::fedprompt).effective_server_steps(), 0u);
  EXPECT_EQ(small_fed(TrainMode::fedprompt_single).effective_server_steps(), 0u);
  auto c = small_fed(TrainMode::fedsp);
  EXPECT_EQ(c.effective_server_steps(), c.local_steps);
  c.server_steps = 0;
  EXPECT_EQ(c.effective_server_steps(), 0u);
}

TEST(RunFederation, ZeroShotAndCentralModesDoNotCommunicate) {
  auto w = make_world();
  for (auto mode : {TrainMode::zero_shot, TrainMode::central_prefix, TrainMode::central_finetune}) {
    const auto r = run_federation(small_fed(mode), env_of(w));
    EXPECT_EQ(r.metrics.summary.total_uploaded_bytes, 0u) << to_string(mode);
    EXPECT_EQ(r.metrics.summary.total_downloaded_bytes, 0u) << to_string(mode);
  }
}

TEST(RunFederation, MismatchedDistilledAuxRejected) {
  auto w = make_world();
  const auto wrong = build_auxiliary(w.global, LayerSelection::bottom, 2, true);
  EXPECT_THROW(run_federation(small_fed(TrainMode::fedsp), env_of(w, &wrong)), std::invalid_argument);
}

TEST(DeriveSeed, StreamsDiffer) {
  EXPECT_EQ(derive_seed(0, 1), derive_seed(0, 1));
  EXPECT_NE(derive_seed(0, 1), derive_seed(0, 2));
  EXPECT_NE(derive_seed(0, 1), derive_seed(1, 1));
}
