#include <gtest/gtest.h>

#include <cstring>
#include <random>

#include "fedsp/model.hpp"
#include "fedsp/ops.hpp"
#include "gradcheck.hpp"

using namespace fedsp;
using fedsp::testing::gradcheck;

namespace {

ModelConfig tiny(std::size_t layers = 2, std::size_t reparam = 0) {
  ModelConfig c;
  c.n_layers = layers;
  c.d_model = 8;
  c.n_heads = 2;
  c.vocab_size = 7;
  c.max_seq_len = 6;
  c.prefix_len = 2;
  c.reparam_hidden = reparam;
  return c;
}

TokenBatch random_tokens(std::mt19937_64& rng, std::size_t batch, std::size_t seq, std::size_t vocab) {
  std::uniform_int_distribution<std::int32_t> d(0, static_cast<std::int32_t>(vocab) - 1);
  TokenBatch tb;
  tb.batch = batch;
  tb.seq = seq;
  for (std::size_t i = 0; i < batch * seq; ++i) tb.ids.push_back(d(rng));
  return tb;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::memcmp(a.data().data(), b.data().data(), 8 * a.numel()) == 0;
}

// Scales weights up so every coordinate has a clearly measurable gradient.
void amplify(const TransformerLM& m, double factor) {
  for (const auto& t : m.parameters()) {
    for (auto& v : t.mutable_data()) v *= factor;
  }
}

// The L-block global model that executes `aux`'s blocks in its unrolled order.
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

}  // namespace

TEST(Forward, LogitsShape) {
  auto c = tiny();
  c.vocab_size = 64;
  c.max_seq_len = 16;
  auto m = TransformerLM::init_global(c, 1);
  std::mt19937_64 rng(1);
  auto r = m.forward(random_tokens(rng, 1, 16, 64));
  EXPECT_EQ(r.logits.shape(), (Shape{1, 16, 64}));
  EXPECT_EQ(r.hidden.shape(), (Shape{1, 16, 8}));
}

TEST(Forward, ZeroPromptsDifferFromNoPrompts) {
  auto c = tiny();
  auto m = TransformerLM::init_global(c, 2);
  auto zero = PromptSet::init_for(c, 3, 0.0);
  std::mt19937_64 rng(2);
  const auto tb = random_tokens(rng, 2, 5, c.vocab_size);
  EXPECT_FALSE(bitwise_equal(m.forward(tb).logits, m.forward(tb, &zero).logits));
}

TEST(Forward, RejectsBadInputs) {
  auto c = tiny();
  auto m = TransformerLM::init_global(c, 3);
  TokenBatch bad{{1, 2, 99}, 1, 3};
  EXPECT_ANY_THROW(m.forward(bad));
  auto shallow = PromptSet::init_direct(1, 2, 8, 4);
  TokenBatch ok{{1, 2, 3}, 1, 3};
  EXPECT_THROW(m.forward(ok, &shallow), std::invalid_argument);
  TokenBatch too_long{{1, 1, 1, 1, 1, 1, 1}, 1, 7};
  EXPECT_THROW(m.forward(too_long), std::invalid_argument);
}

TEST(Forward, Deterministic) {
  auto c = tiny();
  auto a = TransformerLM::init_global(c, 5);
  auto b = TransformerLM::init_global(c, 5);
  auto p = PromptSet::init_for(c, 6);
  std::mt19937_64 rng(3);
  const auto tb = random_tokens(rng, 2, 6, c.vocab_size);
  EXPECT_TRUE(bitwise_equal(a.forward(tb, &p).logits, b.forward(tb, &p).logits));
}

TEST(Forward, Causality) {
  auto c = tiny(3);
  auto m = TransformerLM::init_global(c, 7);
  amplify(m, 5);
  auto p = PromptSet::init_for(c, 8, 0.5);
  std::mt19937_64 rng(4);
  for (const PromptSet* prompts : {static_cast<const PromptSet*>(nullptr), static_cast<const PromptSet*>(&p)}) {
    auto tb = random_tokens(rng, 1, 6, c.vocab_size);
    const auto base = m.forward(tb, prompts).logits;
    for (std::size_t t = 0; t + 1 < 6; ++t) {
      auto changed = tb;
      for (std::size_t j = t + 1; j < 6; ++j) changed.ids[j] = (changed.ids[j] + 3) % 7;
      const auto other = m.forward(changed, prompts).logits;
      for (std::size_t s = 0; s <= t; ++s) {
        for (std::size_t v = 0; v < 7; ++v) EXPECT_EQ(base.at(s * 7 + v), other.at(s * 7 + v));
      }
    }
  }
}

TEST(GradCheck, PrefixedTwoLayerModel) {
  for (std::size_t reparam : {std::size_t{0}, std::size_t{3}}) {
    auto c = tiny(2, reparam);
    auto m = TransformerLM::init_global(c, 9);
    // Unit-scale embeddings keep layer norm away from its high-curvature
    // regime, where central differences at eps=1e-5 lose accuracy.
    for (auto* t : {&m.tok_emb, &m.pos_emb}) {
      for (auto& v : t->mutable_data()) v *= 25;
    }
    auto p = PromptSet::init_for(c, 10, 0.5);
    std::mt19937_64 rng(5);
    const auto tb = random_tokens(rng, 2, 5, c.vocab_size);
    std::vector<std::int32_t> targets;
    for (auto id : random_tokens(rng, 2, 5, c.vocab_size).ids) targets.push_back(id);
    targets[3] = -1;
    auto params = m.named_parameters();
    for (auto& nt : p.named_parameters()) params.push_back(nt);
    const auto r = gradcheck([&] { return ops::cross_entropy(m.forward(tb, &p).logits, targets); }, params);
    EXPECT_LT(r.worst_rel, 1e-6) << "reparam=" << reparam << " worst at " << r.worst_at;
    EXPECT_EQ(r.coords, m.parameter_count() + p.parameter_count());
  }
}

TEST(GradCheck, ReparamMaterialize) {
  auto p = PromptSet::init_reparam(3, 2, 4, 5, 11, 0.7);
  std::mt19937_64 rng(6);
  const auto r = gradcheck(
      [&] {
        Tensor total = Tensor::scalar(0.0);
        std::uint64_t s = 0;
        for (const auto& l : p.materialize()) {
          std::mt19937_64 g(++s);
          std::normal_distribution<double> n;
          std::vector<double> w(l.key.numel());
          for (auto& x : w) x = n(g);
          auto wt = Tensor::from(l.key.shape(), w);
          total = ops::add(total, ops::sum(ops::add(ops::mul(l.key, wt), ops::mul(ops::mul(l.value, l.value), wt))));
        }
        return total;
      },
      p.named_parameters());
  EXPECT_LT(r.worst_rel, 1e-6) << r.worst_at;
}

TEST(Prompts, DirectMaterializeAliasesStorage) {
  auto p = PromptSet::init_direct(2, 3, 4, 12);
  const auto layers = p.materialize();
  const auto named = p.named_parameters();
  ASSERT_EQ(named.size(), 4u);
  EXPECT_TRUE(layers[0].key.same_storage(named[0].tensor));
  EXPECT_TRUE(layers[1].value.same_storage(named[3].tensor));
}

TEST(Prompts, ZeroReparamGivesZeroPrompts) {
  auto p = PromptSet::init_reparam(2, 3, 4, 5, 13);
  for (auto& nt : p.named_parameters()) {
    if (nt.name.find("seed") == std::string::npos) {
      for (auto& v : nt.tensor.mutable_data()) v = 0.0;
    }
  }
  for (const auto& l : p.materialize()) {
    for (double v : l.key.data()) EXPECT_EQ(v, 0.0);
    for (double v : l.value.data()) EXPECT_EQ(v, 0.0);
  }
}

TEST(Prompts, NamedRoundTrip) {
  for (std::size_t h : {std::size_t{0}, std::size_t{5}}) {
    auto c = tiny(3, h);
    auto p = PromptSet::init_for(c, 14);
    auto q = PromptSet::from_named(decode_tensors(encode_tensors(p.named_parameters())));
    EXPECT_TRUE(p.same_shape(q));
    EXPECT_EQ(encode_tensors(q.named_parameters()), encode_tensors(p.named_parameters()));
  }
}

TEST(Prompts, GradientLocality) {
  auto c = tiny();
  auto m = TransformerLM::init_global(c, 15);
  auto p = PromptSet::init_for(c, 16, 0.3);
  std::mt19937_64 rng(7);
  const auto tb = random_tokens(rng, 2, 5, c.vocab_size);
  const auto targets = random_tokens(rng, 2, 5, c.vocab_size).ids;
  auto grads = [&](bool blocks_trainable) {
    m.set_requires_grad(blocks_trainable);
    p.set_requires_grad(true);
    backward(ops::cross_entropy(m.forward(tb, &p).logits, targets));
    std::vector<double> out;
    for (const auto& t : p.parameters()) out.insert(out.end(), t.grad().begin(), t.grad().end());
    return out;
  };
  EXPECT_EQ(grads(true), grads(false));
}

TEST(Auxiliary, LayerSelectionIndices) {
  EXPECT_EQ(selected_first_block(48, 1, LayerSelection::bottom), 0u);
  EXPECT_EQ(selected_first_block(48, 1, LayerSelection::middle), 23u);
  EXPECT_EQ(selected_first_block(48, 1, LayerSelection::top), 47u);
  EXPECT_EQ(selected_first_block(8, 2, LayerSelection::middle), 3u);
  EXPECT_EQ(selected_first_block(8, 2, LayerSelection::top), 6u);
}

TEST(Auxiliary, SharingFactorAndErrors) {
  auto g = TransformerLM::init_global(tiny(8), 17);
  for (auto s : {LayerSelection::bottom, LayerSelection::middle, LayerSelection::top}) {
    auto a = build_auxiliary(g, s, 1);
    EXPECT_EQ(a.sharing_factor(), 8u);
    EXPECT_EQ(a.effective_depth(), 8u);
  }
  EXPECT_THROW(build_auxiliary(g, LayerSelection::bottom, 3), std::invalid_argument);
  auto no_cs = build_auxiliary(g, LayerSelection::bottom, 2, false);
  EXPECT_EQ(no_cs.effective_depth(), 2u);
}

TEST(Auxiliary, DeepCopy) {
  auto g = TransformerLM::init_global(tiny(4), 18);
  const auto before = checksum(g.named_parameters());
  auto a = build_auxiliary(g, LayerSelection::middle, 1);
  EXPECT_TRUE(bitwise_equal(a.blocks()[0].wq, g.blocks()[1].wq));
  for (const auto& t : a.parameters()) {
    for (auto& v : t.mutable_data()) v += 1.0;
  }
  EXPECT_EQ(checksum(g.named_parameters()), before);
}

TEST(Auxiliary, UnrollEquivalence) {
  auto c = tiny(8);
  c.max_seq_len = 8;
  auto g = TransformerLM::init_global(c, 19);
  for (std::size_t n : {std::size_t{1}, std::size_t{2}, std::size_t{4}, std::size_t{8}}) {
    auto aux = build_auxiliary(g, LayerSelection::top, n);
    // Make the copied blocks differ from the global ones.
    for (const auto& t : aux.block_parameters()) {
      for (auto& v : t.mutable_data()) v *= 1.5;
    }
    const auto unrolled = explicit_unroll(aux, g);
    auto p = PromptSet::init_for(c, 20 + n, 0.3);
    std::mt19937_64 rng(n);
    for (int i = 0; i < 10; ++i) {
      const auto tb = random_tokens(rng, 2, 1 + i % 8, c.vocab_size);
      EXPECT_TRUE(bitwise_equal(aux.forward(tb, &p).logits, unrolled.forward(tb, &p).logits)) << "N=" << n;
    }
  }
}

TEST(Auxiliary, CheckpointRoundTrip) {
  auto g = TransformerLM::init_global(tiny(4), 21);
  auto a = build_auxiliary(g, LayerSelection::middle, 2);
  for (const TransformerLM* m : {&g, &a}) {
    const auto bytes = encode_tensors(m->checkpoint_tensors());
    auto back = TransformerLM::from_checkpoint(decode_tensors(bytes));
    EXPECT_EQ(back.config(), m->config());
    EXPECT_EQ(back.is_auxiliary(), m->is_auxiliary());
    EXPECT_EQ(back.execution_order(), m->execution_order());
    EXPECT_EQ(encode_tensors(back.checkpoint_tensors()), bytes);
  }
}

TEST(CountParams, MatchesEnumeration) {
  ModelConfig c;
  c.n_layers = 8;
  c.prefix_len = 8;
  c.d_model = 64;
  c.vocab_size = 14;
  EXPECT_EQ(count_params(ParamKind::prompt_payload, c), 8192u);
  EXPECT_EQ(PromptSet::init_for(c, 1).parameter_count(), 8192u);
  auto g = TransformerLM::init_global(c, 22);
  EXPECT_EQ(count_params(ParamKind::global_model, c), g.parameter_count());
  for (std::size_t n : {std::size_t{1}, std::size_t{2}, std::size_t{4}}) {
    auto a = build_auxiliary(g, LayerSelection::bottom, n);
    EXPECT_EQ(count_params(ParamKind::aux_model, c, n), a.parameter_count());
    EXPECT_LT(a.parameter_count(), g.parameter_count());
  }
  c.reparam_hidden = 16;
  EXPECT_EQ(count_params(ParamKind::prompt_payload, c), PromptSet::init_for(c, 2).parameter_count());
}
