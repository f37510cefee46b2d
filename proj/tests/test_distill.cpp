#include <gtest/gtest.h>

#include <random>

#include "fedsp/distill.hpp"
#include "fedsp/ops.hpp"

using namespace fedsp;

namespace {

Tensor randn(Shape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n;
  std::vector<double> v(numel_of(shape));
  for (auto& x : v) x = n(rng);
  return Tensor::from(std::move(shape), std::move(v));
}

struct World {
  ToyTasks tasks;
  ModelConfig config;
  GlobalModel global;
  std::vector<std::size_t> docs;
};

World make_world(std::size_t layers) {
  ToyTaskOptions o;
  o.pretrain_docs = 100;
  World w{make_toy_tasks(0, o), {}, {}, {}};
  w.config.n_layers = layers;
  w.config.d_model = 8;
  w.config.n_heads = 2;
  w.config.vocab_size = w.tasks.corpus.tokenizer.vocab_size();
  w.config.max_seq_len = 8;
  w.config.prefix_len = 2;
  w.global = TransformerLM::init_global(w.config, 1);
  w.global.set_requires_grad(false);
  w.docs = w.tasks.corpus.indices(Split::train);
  w.docs.resize(64);
  return w;
}

}  // namespace

TEST(KdLoss, IdentityFixedPoint) {
  auto h = randn({2, 3, 4}, 1);
  EXPECT_EQ(kd_loss(h, h, KdProjector::identity(4)).item(), 0.0);
}

TEST(KdLoss, ExactLinearAlignment) {
  auto hs = randn({2, 3, 4}, 2);
  auto ht = ops::scale(hs, 2.0);
  auto proj = KdProjector::identity(4);
  for (auto& v : proj.weight.mutable_data()) v *= 2.0;
  EXPECT_EQ(kd_loss(ht, hs, proj).item(), 0.0);
}

TEST(KdLoss, MatchesScalarOracle) {
  auto ht = randn({2, 3, 4}, 3), hs = randn({2, 3, 4}, 4);
  KdProjector proj{randn({4, 4}, 5)};
  double oracle = 0;
  for (std::size_t r = 0; r < 6; ++r) {
    for (std::size_t i = 0; i < 4; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < 4; ++j) s += hs.at(r * 4 + j) * proj.weight.at(i * 4 + j);
      const double d = ht.at(r * 4 + i) - s;
      oracle += d * d;
    }
  }
  oracle /= 24;
  EXPECT_NEAR(kd_loss(ht, hs, proj).item(), oracle, 1e-13);
}

TEST(KdLoss, TeacherDetached) {
  auto ht = randn({2, 4}, 6), hs = randn({2, 4}, 7);
  ht.set_requires_grad(true);
  hs.set_requires_grad(true);
  auto proj = KdProjector::identity(4);
  backward(kd_loss(ht, hs, proj));
  EXPECT_FALSE(ht.has_grad());
  EXPECT_TRUE(hs.has_grad());
  EXPECT_TRUE(proj.weight.has_grad());
}

TEST(KdLoss, ShapeMismatchThrows) {
  auto proj = KdProjector::identity(4);
  EXPECT_THROW(kd_loss(randn({2, 4}, 1), randn({3, 4}, 2), proj), ShapeError);
  EXPECT_THROW(kd_loss(randn({2, 5}, 1), randn({2, 5}, 2), proj), ShapeError);
}

TEST(RunKd, FullDepthStudentStaysAtZero) {
  auto w = make_world(2);
  auto aux = build_auxiliary(w.global, LayerSelection::bottom, 2);
  KdConfig cfg;
  cfg.steps = 20;
  cfg.batch_size = 8;
  cfg.adamw.weight_decay = 0.0;
  const auto r = run_kd(w.global, aux, cfg, w.tasks.corpus, w.docs);
  ASSERT_EQ(r.curve.size(), 21u);
  for (double l : r.curve) EXPECT_EQ(l, 0.0);
}

TEST(RunKd, TeacherUnchangedAndStudentLearns) {
  auto w = make_world(4);
  const auto before = checksum(w.global.named_parameters());
  auto aux = build_auxiliary(w.global, LayerSelection::bottom, 1);
  const auto aux_before = checksum(aux.named_parameters());
  KdConfig cfg;
  cfg.steps = 60;
  cfg.batch_size = 8;
  cfg.lr = 5e-3;
  const auto r = run_kd(w.global, aux, cfg, w.tasks.corpus, w.docs);
  EXPECT_EQ(checksum(w.global.named_parameters()), before);
  EXPECT_EQ(checksum(aux.named_parameters()), aux_before);
  EXPECT_NE(checksum(r.aux.named_parameters()), aux_before);
  EXPECT_LT(r.curve.back(), r.curve.front());
  for (const auto& t : r.aux.parameters()) EXPECT_FALSE(t.requires_grad());
  EXPECT_EQ(r.aux.named_parameters().size(), aux.named_parameters().size());
}

TEST(RunKd, Deterministic) {
  auto w = make_world(2);
  auto aux = build_auxiliary(w.global, LayerSelection::top, 1);
  KdConfig cfg;
  cfg.steps = 10;
  cfg.batch_size = 8;
  const auto a = run_kd(w.global, aux, cfg, w.tasks.corpus, w.docs);
  const auto b = run_kd(w.global, aux, cfg, w.tasks.corpus, w.docs);
  EXPECT_EQ(a.curve, b.curve);
  EXPECT_EQ(checksum(a.aux.named_parameters()), checksum(b.aux.named_parameters()));
}

TEST(RunKd, TooFewDocumentsThrows) {
  auto w = make_world(2);
  auto aux = build_auxiliary(w.global, LayerSelection::bottom, 1);
  KdConfig cfg;
  cfg.batch_size = 16;
  std::vector<std::size_t> few(w.docs.begin(), w.docs.begin() + 15);
  EXPECT_THROW(run_kd(w.global, aux, cfg, w.tasks.corpus, few), std::invalid_argument);
}
