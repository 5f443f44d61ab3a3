#include <gtest/gtest.h>

#include "dlplora/corpus.hpp"
#include "dlplora/pipeline.hpp"
#include "dlplora/training.hpp"
#include "support.hpp"

using namespace dlplora;

namespace {

BackboneConfig tiny_config() {
  BackboneConfig c;
  c.vocab_size = 64;
  c.d_model = 4;
  c.n_heads = 2;
  c.n_layers = 1;
  c.ffn_dim = 8;
  c.max_seq_len = 16;
  c.seed = 2;
  return c;
}

}  // namespace

TEST(LossFunction, HandComputedCrossEntropy) {
  // Two positions; only the last prediction is supervised.
  const Matrix logits = Matrix::from_rows({{0, 0, 0}, {1, 2, 3}, {0, 0, 0}});
  const TrainingSequence seq{{0, 1, 2}, 2};
  const auto lg = next_token_loss(logits, seq);
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  EXPECT_NEAR(lg.loss, -std::log(std::exp(3.0) / z), 1e-6);
  EXPECT_NEAR(lg.dlogits(1, 2), std::exp(3.0) / z - 1.0, 1e-6);
  EXPECT_EQ(lg.dlogits(0, 0), 0.0f);
  EXPECT_THROW(next_token_loss(logits, TrainingSequence{{0, 1, 2}, 3}), ContractError);
}

TEST(LoraTraining, GradientMatchesFiniteDifferences) {
  // 4x4 projections, rank 2, non-zero B so dA is informative.
  const Backbone bb(tiny_config());
  LoraAdapter ad("g", "t", 2);
  std::uint64_t k = 40;
  for (const auto& name : bb.list_injection_points(true)) {
    const Matrix& w = bb.projection_weight(InjectionPoint::parse(name));
    Matrix a = testing_support::random_matrix(w.rows(), 2, ++k, 0.5f);
    Matrix b = testing_support::random_matrix(2, w.cols(), ++k, 0.5f);
    ad.add_layer(name, std::move(a), std::move(b));
  }
  const TrainingSequence seq{{10, 11, 12, 13, 14, 15}, 3};
  LoraGradients grads;
  {
    const SingleAdapterPath path(ad, bb.config());
    sequence_loss(bb, seq, &path, nullptr, &grads);
  }
  const float h = 1e-3f;
  std::size_t checked = 0;
  for (const auto& name : bb.list_injection_points(true)) {
    const auto pid = InjectionPoint::parse(name).id();
    ASSERT_TRUE(grads.pairs[pid].has_value()) << name;
    for (int which = 0; which < 2; ++which) {
      Matrix& m = which == 0 ? ad.mutable_layer(name).a : ad.mutable_layer(name).b;
      const Matrix& g = which == 0 ? grads.pairs[pid]->a : grads.pairs[pid]->b;
      for (std::size_t i = 0; i < m.size(); ++i) {
        const float saved = m.data()[i];
        m.data()[i] = saved + h;
        const double up = sequence_loss(bb, seq, std::make_unique<SingleAdapterPath>(ad, bb.config()).get(),
                                        nullptr, nullptr);
        m.data()[i] = saved - h;
        const double down = sequence_loss(bb, seq, std::make_unique<SingleAdapterPath>(ad, bb.config()).get(),
                                          nullptr, nullptr);
        m.data()[i] = saved;
        const double numeric = (up - down) / (2.0 * h);
        EXPECT_NEAR(g.data()[i], numeric, 1e-2 * std::max(1e-1, std::abs(numeric)))
            << name << (which ? ".B[" : ".A[") << i << "]";
        ++checked;
      }
    }
  }
  EXPECT_GT(checked, 50u);
}

TEST(LoraTraining, InitAdapterLeavesLogitsUnchanged) {
  const Backbone bb(tiny_config());
  LoraTrainConfig cfg;
  cfg.rank = 2;
  const LoraAdapter ad = init_adapter(bb, "x", "t", cfg);
  const SingleAdapterPath path(ad, bb.config());
  const std::vector<TokenId> toks = {9, 10, 11};
  EXPECT_EQ(bb.forward(toks, &path), bb.forward(toks));
  for (const auto& [name, p] : ad.layers()) {
    EXPECT_EQ(p.b, Matrix(p.b.rows(), p.b.cols()));
    EXPECT_GT(frobenius_norm(p.a), 0.0);
  }
}

TEST(LoraTraining, ConfigAndDataContracts) {
  const Backbone bb(tiny_config());
  LoraTrainConfig cfg;
  cfg.epochs = 0;
  EXPECT_THROW(cfg.validate(), ContractError);
  cfg = {};
  cfg.learning_rate = 0.0f;
  EXPECT_THROW(cfg.validate(), ContractError);
  cfg = {};
  cfg.rank = 8;  // exceeds min(h, d) = 4
  EXPECT_THROW(init_adapter(bb, "x", "t", cfg), RankError);
  EXPECT_THROW(train_adapter(bb, TaskCorpus{"empty", TaskKind::qa, {}}, LoraTrainConfig{}), ContractError);
}

TEST(LoraTraining, DivergenceIsReported) {
  const auto tasks = generate_tasks(1, 20, 3);
  BackboneConfig c;
  c.vocab_size = 128;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_layers = 1;
  c.ffn_dim = 16;
  c.max_seq_len = 32;
  const Backbone bb = init_backbone(tasks, c);
  LoraTrainConfig cfg;
  cfg.learning_rate = 1e30f;
  cfg.epochs = 3;
  try {
    train_adapter(bb, tasks[0], cfg);
    FAIL() << "expected a divergence error";
  } catch (const DivergenceError& e) {
    EXPECT_NE(std::string(e.what()).find("epoch"), std::string::npos);
  }
}

TEST(LoraTraining, ConstantMapLossDecreasesAndTaskIsLearned) {
  // Task index 1 follows the constant-map rule.
  const auto tasks = generate_tasks(2, 60, 5);
  ASSERT_EQ(rule_for_task(1), TaskRule::constant_map);
  BackboneConfig c;
  c.vocab_size = 160;
  c.d_model = 32;
  c.n_heads = 2;
  c.n_layers = 1;
  c.ffn_dim = 64;
  c.max_seq_len = 32;
  c.seed = 1;
  const Backbone bb = init_backbone(tasks, c);
  LoraTrainConfig cfg;
  cfg.rank = 4;
  cfg.epochs = 50;
  const auto result = train_adapter(bb, tasks[1], cfg);
  const auto& loss = result.epoch_losses;
  ASSERT_EQ(loss.size(), 50u);
  // Monotone over the first ten epochs, allowing one non-decreasing step.
  int ups = 0;
  for (std::size_t e = 1; e < 10; ++e) ups += loss[e] >= loss[e - 1];
  EXPECT_LE(ups, 1);
  EXPECT_LT(loss.back(), 0.2 * loss.front());

  const Backbone merged = bb.merged_with(result.adapter);
  const auto& ex = tasks[1].examples.front();
  const auto out = merged.generate(bb.vocab().encode(ex.prompt), 2);
  const std::vector<TokenId> gen(out.end() - 2, out.end());
  EXPECT_EQ(bb.vocab().decode(gen), ex.target);
}
