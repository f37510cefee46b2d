#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <map>
#include <numeric>
#include <set>

#include "fedsp/data.hpp"
#include "fedsp/model.hpp"

using namespace fedsp;
namespace fs = std::filesystem;

namespace {

ToyTaskOptions small_world() {
  ToyTaskOptions o;
  o.pretrain_docs = 200;
  return o;
}

Corpus numbered_corpus(std::size_t n, int categories = 4) {
  Corpus c;
  for (std::size_t i = 0; i < n; ++i) {
    c.documents.push_back({"d" + std::to_string(i), Split::train, static_cast<int>(i % categories)});
  }
  c.documents.push_back({"x", Split::pretrain, 0});
  std::vector<std::string> texts;
  for (const auto& d : c.documents) texts.push_back(d.text);
  c.tokenizer = Tokenizer::from_texts(texts);
  return c;
}

double chi2_to_global(const Corpus& corpus, const Partition& p) {
  std::map<int, double> global;
  double total = 0;
  for (const auto& shard : p.clients) {
    for (auto i : shard) {
      global[corpus.documents[i].category] += 1;
      total += 1;
    }
  }
  double chi2 = 0;
  for (const auto& shard : p.clients) {
    std::map<int, double> counts;
    for (auto i : shard) counts[corpus.documents[i].category] += 1;
    for (const auto& [cat, n] : global) {
      const double expected = n / total * static_cast<double>(shard.size());
      if (expected > 0) chi2 += (counts[cat] - expected) * (counts[cat] - expected) / expected;
    }
  }
  return chi2;
}

ModelConfig model_for(const Tokenizer& tok) {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 8;
  c.n_heads = 2;
  c.vocab_size = tok.vocab_size();
  c.max_seq_len = 8;
  c.prefix_len = 2;
  return c;
}

}  // namespace

TEST(Tokenizer, RoundTripAndRange) {
  const std::vector<std::string> texts{"T:123=3", "héllo", "?:000=0"};
  auto tok = Tokenizer::from_texts(texts);
  for (const auto& t : texts) {
    const auto ids = tok.encode(t);
    for (auto id : ids) {
      EXPECT_GE(id, 2);
      EXPECT_LT(static_cast<std::size_t>(id), tok.vocab_size());
    }
    EXPECT_EQ(tok.decode(ids), t);
  }
  EXPECT_ANY_THROW(tok.encode("z"));
  const auto& a = tok.alphabet();
  EXPECT_TRUE(std::is_sorted(a.begin(), a.end()));
}

TEST(ToyTasks, Deterministic) {
  const auto a = make_toy_tasks(0, small_world());
  const auto b = make_toy_tasks(0, small_world());
  ASSERT_EQ(a.corpus.documents.size(), b.corpus.documents.size());
  for (std::size_t i = 0; i < a.corpus.documents.size(); ++i) {
    EXPECT_EQ(a.corpus.documents[i].text, b.corpus.documents[i].text);
  }
  ASSERT_EQ(a.probes.size(), b.probes.size());
  for (std::size_t i = 0; i < a.probes.size(); ++i) {
    EXPECT_EQ(a.probes[i].options, b.probes[i].options);
    EXPECT_EQ(a.probes[i].gold, b.probes[i].gold);
  }
  const auto c = make_toy_tasks(1, small_world());
  EXPECT_NE(a.corpus.documents[0].text + a.corpus.documents[1].text,
            c.corpus.documents[0].text + c.corpus.documents[1].text);
}

TEST(ToyTasks, GoldFollowsRule) {
  for (auto rule : {ToyRule::first, ToyRule::second, ToyRule::third}) {
    auto opts = small_world();
    opts.task = rule;
    const auto t = make_toy_tasks(3, opts);
    ASSERT_FALSE(t.probes.empty());
    for (const auto& ex : t.probes) {
      ASSERT_EQ(ex.context.size(), 6u);
      const std::array<int, 3> d{ex.context[2] - '0', ex.context[3] - '0', ex.context[4] - '0'};
      EXPECT_EQ(ex.options.at(ex.gold), std::string(1, static_cast<char>('0' + apply_rule(rule, d))));
      std::set<std::string> distinct(ex.options.begin(), ex.options.end());
      EXPECT_EQ(distinct.size(), ex.options.size());
    }
    for (auto i : t.corpus.indices(Split::train)) {
      const auto& text = t.corpus.documents[i].text;
      const std::array<int, 3> d{text[2] - '0', text[3] - '0', text[4] - '0'};
      EXPECT_EQ(text[6] - '0', apply_rule(rule, d));
    }
  }
}

TEST(ToyTasks, ProbesAreHeldOut) {
  const auto t = make_toy_tasks(0, small_world());
  std::set<std::string> train;
  for (const auto& d : t.corpus.documents) {
    if (d.split != Split::eval) train.insert(d.text.substr(2, 3));
  }
  for (const auto& ex : t.probes) EXPECT_EQ(train.count(ex.context.substr(2, 3)), 0u) << ex.context;
}

TEST(ToyTasks, SizedForDefaultPartition) {
  const auto t = make_toy_tasks(0);
  const std::size_t k = 10, min_shard = 16;
  EXPECT_GE(t.corpus.indices(Split::train).size(), (k + 1) * min_shard);
  const auto p = partition(t.corpus, k, PartitionScheme::iid, 0);
  EXPECT_GE(p.proxy.size(), min_shard);
  for (const auto& s : p.clients) EXPECT_GE(s.size(), min_shard);
}

TEST(Partition, IidBalance) {
  const auto c = numbered_corpus(101);
  const auto p = partition(c, 10, PartitionScheme::iid, 7);
  EXPECT_EQ(p.proxy.size(), 10u);
  std::vector<std::size_t> sizes;
  for (const auto& s : p.clients) sizes.push_back(s.size());
  std::sort(sizes.begin(), sizes.end());
  EXPECT_EQ(sizes.front(), 9u);
  EXPECT_EQ(sizes.back(), 10u);
  EXPECT_EQ(std::accumulate(sizes.begin(), sizes.end(), std::size_t{0}), 91u);
}

TEST(Partition, DisjointWithinTrain) {
  const auto t = make_toy_tasks(0, small_world());
  for (auto scheme : {PartitionScheme::iid, PartitionScheme::label_skew}) {
    const auto p = partition(t.corpus, 10, scheme, 3, 0.5);
    std::set<std::size_t> seen(p.proxy.begin(), p.proxy.end());
    EXPECT_EQ(seen.size(), p.proxy.size());
    std::size_t total = p.proxy.size();
    for (const auto& s : p.clients) {
      EXPECT_FALSE(s.empty());
      total += s.size();
      seen.insert(s.begin(), s.end());
    }
    EXPECT_EQ(seen.size(), total);
    for (auto i : seen) EXPECT_EQ(t.corpus.documents[i].split, Split::train);
  }
}

TEST(Partition, InsufficientDataThrows) {
  const auto c = numbered_corpus(5);
  EXPECT_THROW(partition(c, 10, PartitionScheme::iid, 0), std::invalid_argument);
}

TEST(Partition, LabelSkewLargeAlphaApproachesIid) {
  const auto c = numbered_corpus(600, 10);
  std::vector<double> iid;
  double skew_mean = 0, sharp_mean = 0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    iid.push_back(chi2_to_global(c, partition(c, 10, PartitionScheme::iid, seed)));
    skew_mean += chi2_to_global(c, partition(c, 10, PartitionScheme::label_skew, seed, 1e6)) / 50;
    sharp_mean += chi2_to_global(c, partition(c, 10, PartitionScheme::label_skew, seed, 0.1)) / 50;
  }
  std::sort(iid.begin(), iid.end());
  const double p95 = iid[static_cast<std::size_t>(0.95 * (iid.size() - 1))];
  EXPECT_LT(skew_mean, p95);
  EXPECT_GT(sharp_mean, p95);
}

TEST(Partition, JsonRoundTrip) {
  const auto c = numbered_corpus(60);
  const auto p = partition(c, 4, PartitionScheme::iid, 1);
  const auto path = fs::temp_directory_path() / "fedsp_partition_test.json";
  save_partition_json(path, p);
  const auto q = load_partition_json(path);
  EXPECT_EQ(q.proxy, p.proxy);
  EXPECT_EQ(q.clients, p.clients);
  fs::remove(path);
}

TEST(Serialization, CorpusAndExamplesRoundTrip) {
  const auto t = make_toy_tasks(2, small_world());
  const auto dir = fs::temp_directory_path();
  save_corpus_jsonl(dir / "fedsp_corpus_test.jsonl", t.corpus);
  save_examples_jsonl(dir / "fedsp_probes_test.jsonl", t.probes);
  const auto c = load_corpus_jsonl(dir / "fedsp_corpus_test.jsonl");
  const auto e = load_examples_jsonl(dir / "fedsp_probes_test.jsonl");
  ASSERT_EQ(c.documents.size(), t.corpus.documents.size());
  EXPECT_EQ(c.tokenizer.alphabet(), t.corpus.tokenizer.alphabet());
  for (std::size_t i = 0; i < c.documents.size(); ++i) {
    EXPECT_EQ(c.documents[i].text, t.corpus.documents[i].text);
    EXPECT_EQ(c.documents[i].split, t.corpus.documents[i].split);
    EXPECT_EQ(c.documents[i].category, t.corpus.documents[i].category);
  }
  ASSERT_EQ(e.size(), t.probes.size());
  for (std::size_t i = 0; i < e.size(); ++i) {
    EXPECT_EQ(e[i].context, t.probes[i].context);
    EXPECT_EQ(e[i].options, t.probes[i].options);
    EXPECT_EQ(e[i].gold, t.probes[i].gold);
  }
  fs::remove(dir / "fedsp_corpus_test.jsonl");
  fs::remove(dir / "fedsp_probes_test.jsonl");
}

TEST(Batches, LmBatchShiftsAndPads) {
  Corpus c;
  c.documents = {{"ab", Split::train, 0}, {"abcd", Split::train, 0}};
  std::vector<std::string> texts{"abcd"};
  c.tokenizer = Tokenizer::from_texts(texts);
  const std::vector<std::size_t> idx{0, 1};
  const auto b = make_lm_batch(c, idx);
  EXPECT_EQ(b.inputs.batch, 2u);
  EXPECT_EQ(b.inputs.seq, 4u);
  // Row 0: BOS a | b pad..., targets a b -1 -1.
  EXPECT_EQ(b.inputs.ids[0], Tokenizer::kBos);
  EXPECT_EQ(b.targets[0], c.tokenizer.encode("a")[0]);
  EXPECT_EQ(b.targets[1], c.tokenizer.encode("b")[0]);
  EXPECT_EQ(b.targets[2], -1);
  EXPECT_EQ(b.targets[7], c.tokenizer.encode("d")[0]);
}

TEST(Batches, StreamCoversEveryEpoch) {
  std::vector<std::size_t> docs(10);
  std::iota(docs.begin(), docs.end(), 100);
  BatchStream s(docs, 5, 9);
  for (int epoch = 0; epoch < 3; ++epoch) {
    std::multiset<std::size_t> seen;
    for (int i = 0; i < 2; ++i) {
      auto b = s.next();
      EXPECT_EQ(b.size(), 5u);
      seen.insert(b.begin(), b.end());
    }
    EXPECT_EQ(seen, std::multiset<std::size_t>(docs.begin(), docs.end()));
  }
  BatchStream small(std::vector<std::size_t>{1, 2}, 16, 0);
  EXPECT_EQ(small.next().size(), 2u);
}

TEST(McEval, UniformModelPicksFirstOption) {
  const auto t = make_toy_tasks(4, small_world());
  auto m = TransformerLM::init_global(model_for(t.corpus.tokenizer), 1);
  for (auto* w : {&m.head_w, &m.head_b}) {
    for (auto& v : w->mutable_data()) v = 0.0;
  }
  const double expected =
      static_cast<double>(std::count_if(t.probes.begin(), t.probes.end(), [](const McExample& e) { return e.gold == 0; })) /
      static_cast<double>(t.probes.size());
  EXPECT_EQ(mc_accuracy(m, nullptr, t.corpus.tokenizer, t.probes), expected);
}

TEST(McEval, OracleScoresGiveFullAccuracy) {
  const auto t = make_toy_tasks(4, small_world());
  std::vector<std::vector<double>> scores;
  for (const auto& ex : t.probes) {
    std::vector<double> s(ex.options.size(), -1.0);
    s[ex.gold] = std::numeric_limits<double>::infinity();
    scores.push_back(s);
  }
  EXPECT_EQ(accuracy_from_scores(scores, t.probes), 1.0);
}

TEST(McEval, ScoresMatchScalarOracle) {
  const auto t = make_toy_tasks(5, small_world());
  const auto cfg = model_for(t.corpus.tokenizer);
  auto m = TransformerLM::init_global(cfg, 2);
  for (const auto& w : m.parameters()) {
    for (auto& v : w.mutable_data()) v *= 10;
  }
  auto p = PromptSet::init_for(cfg, 3, 0.5);
  std::vector<McExample> examples(t.probes.begin(), t.probes.begin() + 20);
  examples[0].options = {"12", "3", "45"};
  examples[0].gold = 1;
  for (const PromptSet* prompts : {static_cast<const PromptSet*>(nullptr), static_cast<const PromptSet*>(&p)}) {
    const auto scores = mc_scores(m, prompts, t.corpus.tokenizer, examples);
    for (std::size_t e = 0; e < examples.size(); ++e) {
      const auto ctx = t.corpus.tokenizer.encode(examples[e].context);
      for (std::size_t o = 0; o < examples[e].options.size(); ++o) {
        const auto opt = t.corpus.tokenizer.encode(examples[e].options[o]);
        TokenBatch tb;
        tb.batch = 1;
        tb.ids.push_back(Tokenizer::kBos);
        tb.ids.insert(tb.ids.end(), ctx.begin(), ctx.end());
        tb.ids.insert(tb.ids.end(), opt.begin(), opt.end() - 1);
        tb.seq = tb.ids.size();
        const auto logits = m.forward(tb, prompts).logits;
        const std::size_t v = cfg.vocab_size;
        double oracle = 0;
        for (std::size_t j = 0; j < opt.size(); ++j) {
          const std::size_t row = ctx.size() + j;
          double mx = -std::numeric_limits<double>::infinity();
          for (std::size_t k = 0; k < v; ++k) mx = std::max(mx, logits.at(row * v + k));
          double z = 0;
          for (std::size_t k = 0; k < v; ++k) z += std::exp(logits.at(row * v + k) - mx);
          oracle += logits.at(row * v + static_cast<std::size_t>(opt[j])) - mx - std::log(z);
        }
        EXPECT_NEAR(scores[e][o], oracle, 1e-10) << "example " << e << " option " << o;
      }
    }
  }
}

TEST(McEval, OptionOrderInvariant) {
  const auto t = make_toy_tasks(6, small_world());
  const auto cfg = model_for(t.corpus.tokenizer);
  auto m = TransformerLM::init_global(cfg, 4);
  for (const auto& w : m.parameters()) {
    for (auto& v : w.mutable_data()) v *= 10;
  }
  std::vector<McExample> examples(t.probes.begin(), t.probes.begin() + 40);
  auto reversed = examples;
  for (auto& ex : reversed) {
    std::reverse(ex.options.begin(), ex.options.end());
    ex.gold = ex.options.size() - 1 - ex.gold;
  }
  EXPECT_EQ(mc_accuracy(m, nullptr, t.corpus.tokenizer, examples),
            mc_accuracy(m, nullptr, t.corpus.tokenizer, reversed));
}

TEST(McEval, Errors) {
  const auto t = make_toy_tasks(0, small_world());
  auto m = TransformerLM::init_global(model_for(t.corpus.tokenizer), 1);
  EXPECT_THROW(mc_accuracy(m, nullptr, t.corpus.tokenizer, {}), std::invalid_argument);
  McExample too_long{"?:123=", {"12345", "1"}, 0, 0};
  EXPECT_THROW(mc_accuracy(m, nullptr, t.corpus.tokenizer, std::vector<McExample>{too_long}), std::invalid_argument);
}
