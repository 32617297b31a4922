#include <gtest/gtest.h>

#include <limits>

#include "tablelab/dataset.hpp"
#include "tablelab/train.hpp"

using namespace tablelab;

namespace {

ModelConfig tiny(int vocab) {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 32;
  c.d_head = 16;
  c.d_mlp = 64;
  c.vocab_size = vocab;
  c.max_seq_len = 64;
  return c;
}

}  // namespace

TEST(Schedule, WarmupThenCosine) {
  TrainConfig c;
  c.lr = 1e-3;
  c.steps = 1000;
  c.warmup_steps = 100;
  c.lr_min_ratio = 0.1;
  EXPECT_NEAR(lr_at(c, 0), 1e-5, 1e-12);
  EXPECT_NEAR(lr_at(c, 99), 1e-3, 1e-12);
  EXPECT_NEAR(lr_at(c, 100), 1e-3, 1e-12);
  EXPECT_NEAR(lr_at(c, 550), 0.55e-3, 1e-9);
  EXPECT_NEAR(lr_at(c, 1000), 1e-4, 1e-12);
  for (int s = 100; s < 999; ++s) EXPECT_GE(lr_at(c, s), lr_at(c, s + 1));
}

TEST(Train, MemorizesSmallSet) {
  DatasetConfig dc;
  dc.n_categories = 6;
  dc.values_per_category = 5;
  dc.n_key_values = 5;
  dc.min_rows = dc.max_rows = 3;
  dc.min_cols = dc.max_cols = 3;
  dc.demo = false;
  Workspace ws(dc, 64);
  const auto samples = generate_samples(dc, ws.pool, "train", SampleMix::atomic, 8);
  std::vector<TrainExample> data;
  std::vector<PromptInstance> prompts;
  for (const auto& s : samples) {
    prompts.push_back(ws.prompt(s));
    data.push_back(make_train_example(prompts.back()));
  }
  auto m = init_model<float>(tiny(ws.vocab.size()), 3);
  TrainConfig tc;
  tc.steps = 300;
  tc.batch_size = 8;
  tc.lr = 3e-3;
  tc.warmup_steps = 20;
  tc.eval_interval = 100;
  std::vector<MetricPoint> seen;
  const auto res = train(m, data, prompts, tc, [&](const MetricPoint& p) { seen.push_back(p); });
  ASSERT_EQ(seen.size(), 3u);
  EXPECT_LT(seen.back().loss, seen.front().loss);
  EXPECT_EQ(res.final_heldout_em, 1.0);
  EXPECT_EQ(em_eval(m, prompts), 1.0);
}

TEST(Train, DeterministicForSeed) {
  std::vector<TrainExample> data(4);
  for (int i = 0; i < 4; ++i) {
    data[i].tokens = {0, 10 + i, 11 + i, 12 + i, 3};
    data[i].targets = {{2, 12 + i, 1.0}, {3, 3, 1.0}};
  }
  TrainConfig tc;
  tc.steps = 20;
  tc.batch_size = 2;
  tc.eval_interval = 0;
  auto a = init_model<float>(tiny(20), 1), b = init_model<float>(tiny(20), 1);
  train(a, data, {}, tc);
  train(b, data, {}, tc);
  EXPECT_EQ(forward(a, data[0].tokens).logits, forward(b, data[0].tokens).logits);
}

TEST(Train, NonFiniteLossRaises) {
  std::vector<TrainExample> data(1);
  data[0].tokens = {0, 5, 6, 3};
  data[0].targets = {{2, 6, 1.0}};
  auto m = init_model<float>(tiny(10), 1);
  m.w.embed(5, 0) = std::numeric_limits<float>::quiet_NaN();
  TrainConfig tc;
  tc.steps = 2;
  tc.batch_size = 1;
  EXPECT_THROW(train(m, data, {}, tc), NumericalError);
  EXPECT_THROW(train(m, std::span<const TrainExample>{}, {}, tc), std::invalid_argument);
}

TEST(TrainExample, TargetsCoverAnswerAndStop) {
  DatasetConfig dc;
  dc.n_categories = 6;
  dc.values_per_category = 5;
  dc.n_key_values = 6;
  dc.max_rows = dc.max_cols = 4;
  Workspace ws(dc);
  const auto s = generate_samples(dc, ws.pool, "train", SampleMix::atomic, 1)[0];
  const auto p = ws.prompt(s);
  auto ex = make_train_example(p);
  ASSERT_EQ(ex.targets.size(), p.answer_ids.size() + 1);
  EXPECT_EQ(ex.targets[0].position, p.predict_position());
  EXPECT_EQ(ex.targets[0].token, p.answer_ids[0]);
  EXPECT_EQ(ex.targets.back().token, Vocab::newline);
  const std::size_t before = ex.tokens.size();
  std::vector<QuerySpec> more{s.query};
  append_followup_queries(ex, ws.vocab, s.table, more);
  ASSERT_EQ(ex.targets.size(), 2 * (p.answer_ids.size() + 1));
  // The follow-up repeats the question, so its tokens equal the first block.
  for (std::size_t i = 0; i < before - static_cast<std::size_t>(p.query.begin); ++i)
    EXPECT_EQ(ex.tokens[before + i], ex.tokens[static_cast<std::size_t>(p.query.begin) + i]);
  for (const auto& t : ex.targets) EXPECT_EQ(ex.tokens[static_cast<std::size_t>(t.position) + 1], t.token);
  auto full = make_train_example(p, true, 5.0);
  EXPECT_EQ(full.targets.size(), static_cast<std::size_t>(p.length() + static_cast<int>(p.answer_ids.size())));
  EXPECT_EQ(full.targets.front().weight, 1.0);
  EXPECT_EQ(full.targets.back().weight, 5.0);
}
