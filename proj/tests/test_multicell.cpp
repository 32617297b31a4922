#include <gtest/gtest.h>

#include "tablelab/multicell.hpp"
#include "test_util.hpp"

using namespace tablelab;

TEST(SplitAnswer, Commas) {
  const std::vector<int> a{20, 21, Vocab::comma, 22, Vocab::comma};
  const auto s = split_answer(a);
  ASSERT_EQ(s.size(), 3u);
  EXPECT_EQ(s[0], (std::vector<int>{20, 21}));
  EXPECT_EQ(s[1], (std::vector<int>{22}));
  EXPECT_TRUE(s[2].empty());
  EXPECT_EQ(split_answer(std::vector<int>{}).size(), 1u);
}

TEST(Slots, GoldAnswerIsExactAndTruncationIsMissing) {
  const auto dc = testutil::small_dataset();
  Workspace ws(dc, 200);
  for (auto mix : {SampleMix::multi_row, SampleMix::multi_col}) {
    for (const auto& s : generate_samples(dc, ws.pool, "test", mix, 40)) {
      const auto p = ws.prompt(s);
      const auto cells = s.query.answer_cells();
      const auto cats = categorize_slots(p.answer_ids, ws.vocab, s.table, s.query);
      ASSERT_EQ(cats.size(), cells.size());
      for (auto c : cats) EXPECT_EQ(c, ErrorCategory::exact);
      // Keep only the first slot.
      const auto first = split_answer(p.answer_ids)[0];
      const auto cut = categorize_slots(first, ws.vocab, s.table, s.query);
      EXPECT_EQ(cut[0], ErrorCategory::exact);
      for (std::size_t k = 1; k < cut.size(); ++k) EXPECT_EQ(cut[k], ErrorCategory::not_in_table);
    }
  }
}

TEST(MultiCellEval, Consistency) {
  const auto dc = testutil::small_dataset();
  Workspace ws(dc, 200);
  auto mc = testutil::small_model(ws.vocab.size());
  mc.max_seq_len = 200;
  const auto model = testutil::random_model(mc, 5, 0.2);
  const auto samples = generate_samples(dc, ws.pool, "test", SampleMix::multi_row, 16);
  const auto rep = multicell_eval(model, ws, samples);
  EXPECT_EQ(rep.kind, "multi_row");
  EXPECT_EQ(rep.n, 16);
  int slots = 0;
  for (std::size_t k = 0; k < rep.position_accuracy.size(); ++k) {
    EXPECT_LE(rep.em, rep.position_accuracy[k] + 1e-12);
    slots += rep.position_count[k];
  }
  EXPECT_EQ(rep.breakdown.total, slots);
  EXPECT_EQ(rep.position_count[0], 16);

  const auto again = multicell_eval(model, ws, samples, {}, 2);
  EXPECT_EQ(again.to_json(), rep.to_json());
  const std::vector<HeadId> heads{{1, 0}, {2, 1}};
  const auto abl = multicell_ablation(model, ws, samples, heads);
  EXPECT_EQ(abl.ablated, heads);
  EXPECT_EQ(abl.to_json(), multicell_eval(model, ws, samples, heads, 2).to_json());
}

TEST(RowArgmax, PlantedMaxima) {
  Eigen::MatrixXd S(3, 4);
  S << 0, 5, 1, 5,  //
      2, 0, 0, 9,   //
      1, 1, 1, 1;
  EXPECT_EQ(row_argmax(S), (std::vector<int>{1, 3, 0}));
}

TEST(Heatmap, ShapesAndHeadAveraging) {
  const auto dc = testutil::small_dataset();
  Workspace ws(dc, 200);
  auto mc = testutil::small_model(ws.vocab.size());
  mc.max_seq_len = 200;
  const auto model = testutil::random_model(mc, 8, 0.2);
  std::vector<PromptInstance> prompts;
  for (const auto& s : generate_samples(dc, ws.pool, "test", SampleMix::multi_col, 20)) prompts.push_back(ws.prompt(s));
  const HeadId a{1, 0}, b{2, 1};
  const auto both = multicell_rope_heatmap(model, prompts, {a, b});
  const auto ha = multicell_rope_heatmap(model, prompts, {a});
  const auto hb = multicell_rope_heatmap(model, prompts, {b});
  ASSERT_FALSE(both.empty());
  ASSERT_EQ(both.size(), ha.size());
  int n = 0;
  for (std::size_t i = 0; i < both.size(); ++i) {
    EXPECT_GE(both[i].cardinality, 2);
    EXPECT_EQ(both[i].first_index, 1);
    EXPECT_LE(both[i].S.rows(), 4);
    EXPECT_EQ(both[i].S.cols(), both[i].S.rows());
    EXPECT_LT((both[i].S - (ha[i].S + hb[i].S) / 2.0).cwiseAbs().maxCoeff(), 1e-9);
    n += both[i].n_prompts;
  }
  EXPECT_EQ(n, 20);
}
