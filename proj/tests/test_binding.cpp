#include <gtest/gtest.h>

#include <map>

#include "tablelab/binding.hpp"
#include "test_util.hpp"

using namespace tablelab;

namespace {

struct Bench {
  DatasetConfig dc = testutil::small_dataset();
  Workspace ws{dc, 160};
  std::vector<Sample> samples = generate_samples(dc, ws.pool, "test", SampleMix::atomic, 16);
  std::vector<PromptInstance> prompts;
  Model<float> model = testutil::random_model(testutil::small_model(ws.vocab.size()), 9);
  Bench() {
    for (const auto& s : samples) prompts.push_back(ws.prompt(s));
  }
};

}  // namespace

TEST(HeaderCandidates, PickHeaderRowAndKeyColumn) {
  Bench s;
  for (std::size_t i = 0; i < s.samples.size(); ++i) {
    const auto& p = s.prompts[i];
    const auto& t = s.samples[i].table;
    const auto tc = token_coords(p);
    const auto col = header_candidates(p, tc, Axis::column);
    ASSERT_EQ(static_cast<int>(col.positions.size()), t.cols() - 1);
    for (std::size_t k = 0; k < col.positions.size(); ++k)
      EXPECT_EQ(s.ws.vocab.word(p.token_ids[col.positions[k]]), t.col_headers[k + 1]);
    EXPECT_EQ(col.gold + 1, s.samples[i].query.col_targets[0]);
    const auto row = header_candidates(p, tc, Axis::row);
    ASSERT_EQ(static_cast<int>(row.positions.size()), t.rows());
    EXPECT_EQ(row.gold, s.samples[i].query.row_targets[0]);
  }
}

TEST(Similarity, EmbeddingLayerMatchesIdenticalTokens) {
  Bench s;
  const auto acc = header_similarity_accuracy(s.model, s.prompts);
  ASSERT_EQ(acc.row.size(), 4u);
  EXPECT_DOUBLE_EQ(acc.row[0], 1.0);
  EXPECT_DOUBLE_EQ(acc.column[0], 1.0);
  EXPECT_EQ(acc.n_row[0], 16);
  EXPECT_EQ(acc.excluded, 0);
}

TEST(Similarity, TiesAndZeroNorm) {
  Eigen::RowVectorXd q(2), a(2), b(2);
  q << 1, 0;
  a << 2, 0;
  b << 5, 0;
  EXPECT_EQ(most_similar(q, {a, b}), 0);
  b << 0, 1;
  EXPECT_EQ(most_similar(q, {b, a}), 1);
  EXPECT_FALSE(most_similar(Eigen::RowVectorXd::Zero(2), {a}).has_value());
  EXPECT_FALSE(most_similar(q, {a, Eigen::RowVectorXd::Zero(2)}).has_value());
}

TEST(AlignmentScore, Extremes) {
  HeaderCandidates hc{{2, 4, 6}, 1};
  MatF attn = MatF::Zero(10, 10);
  attn(8, 4) = 1.0f;
  EXPECT_NEAR(*alignment_score(attn, Span{8, 9}, hc), 1.0, 1e-9);
  attn(8, 4) = 0.0f;
  attn(8, 2) = 0.5f;
  attn(8, 6) = 0.5f;
  EXPECT_NEAR(*alignment_score(attn, Span{8, 9}, hc), -0.5, 1e-9);
  attn.setZero();
  attn(8, 4) = 0.6f;
  attn(8, 2) = 0.2f;
  attn(9, 4) = 0.2f;
  EXPECT_NEAR(*alignment_score(attn, Span{8, 10}, hc), (0.5 + 0.2) / 2, 1e-6);
  EXPECT_FALSE(alignment_score(attn, Span{8, 9}, HeaderCandidates{{4}, 0}).has_value());
}

TEST(AlignmentHeads, ShapeAndSelection) {
  Bench s;
  const auto t = alignment_heads(s.model, s.prompts, Axis::row, 3);
  EXPECT_EQ(t.score.rows(), 3);
  EXPECT_EQ(t.score.cols(), 2);
  EXPECT_EQ(t.n_samples, 16);
  ASSERT_EQ(t.selected.size(), 3u);
  for (std::size_t i = 1; i < t.selected.size(); ++i)
    EXPECT_GE(t.score(t.selected[i - 1].layer, t.selected[i - 1].head), t.score(t.selected[i].layer, t.selected[i].head));
  // Scores are bounded by the definition.
  EXPECT_LE(t.score.maxCoeff(), 1.0);
  EXPECT_GE(t.score.minCoeff(), -1.0);
}

TEST(TopHeads, StableDescending) {
  Eigen::MatrixXd s(2, 2);
  s << 0.5, 0.9, 0.5, 0.1;
  const auto h = top_heads(s, 3);
  ASSERT_EQ(h.size(), 3u);
  EXPECT_EQ(h[0], (HeadId{0, 1}));
  EXPECT_EQ(h[1], (HeadId{0, 0}));
  EXPECT_EQ(h[2], (HeadId{1, 0}));
  EXPECT_TRUE(top_heads(s, 0).empty());
  EXPECT_EQ(top_heads(s, 10).size(), 4u);
}

// Random outputs against an oracle built from a word -> grid-position index.
TEST(Taxonomy, Fuzz) {
  Bench s;
  Rng rng = make_stream(3, 3);
  int seen[7] = {};
  for (int trial = 0; trial < 10000; ++trial) {
    const Table t = generate_table(s.ws.pool, s.dc.dims(), rng);
    const auto q = make_query(t, QueryKind::atomic, 1, rng);
    const int r = q.row_targets[0], c = q.col_targets[0];
    std::map<std::string, std::pair<int, int>> where;
    for (int rr = 0; rr < t.rows(); ++rr)
      for (int cc = 1; cc < t.cols(); ++cc) where[t.at(rr, cc)] = {rr, cc};
    std::vector<int> pred;
    const int mode = static_cast<int>(uniform_index(rng, 6));
    if (mode == 0) pred = {s.ws.vocab.id(t.at(static_cast<int>(uniform_index(rng, t.rows())), 1 + static_cast<int>(uniform_index(rng, t.cols() - 1))))};
    else if (mode == 1) pred = {s.ws.vocab.id(t.row_headers[uniform_index(rng, t.rows())])};
    else if (mode == 2) pred = {s.ws.vocab.id(t.col_headers[uniform_index(rng, t.cols())])};
    else if (mode == 3) pred = {static_cast<int>(uniform_index(rng, s.ws.vocab.size()))};
    else if (mode == 4) pred = {};
    else pred = {s.ws.vocab.id(t.at(r, c)), Vocab::comma};
    ErrorCategory want = ErrorCategory::not_in_table;
    if (pred.size() == 1) {
      const std::string& w = s.ws.vocab.word(pred[0]);
      if (w == t.at(r, c)) want = ErrorCategory::exact;
      else if (w == t.row_headers[r]) want = ErrorCategory::row_header;
      else if (w == t.col_headers[c]) want = ErrorCategory::column_header;
      else if (auto it = where.find(w); it != where.end()) {
        const auto [wr, wc] = it->second;
        want = wr == r ? ErrorCategory::wrong_column : wc == c ? ErrorCategory::wrong_row : ErrorCategory::wrong_row_and_column;
      }
    }
    const auto got = categorize_output(pred, s.ws.vocab, t, q);
    ASSERT_EQ(got, want) << "trial " << trial;
    ++seen[static_cast<int>(got)];
  }
  for (int k = 0; k < 7; ++k) EXPECT_GT(seen[k], 0) << to_string(kErrorCategories[k]);
}

TEST(ErrorBreakdown, Shares) {
  ErrorBreakdown b;
  b.add(ErrorCategory::exact);
  b.add(ErrorCategory::exact);
  b.add(ErrorCategory::wrong_row);
  b.add(ErrorCategory::not_in_table);
  EXPECT_DOUBLE_EQ(b.em(), 0.5);
  EXPECT_DOUBLE_EQ(b.share(ErrorCategory::wrong_row), 0.25);
  EXPECT_EQ(b.to_json()["total"], 4);
  EXPECT_EQ(ErrorBreakdown{}.em(), 0.0);
}

TEST(Ablation, NoHeadsEqualsPlainDecodeAndZeroingIsDeterministic) {
  Bench s;
  const auto base = zero_ablate_eval(s.model, s.ws, s.samples, s.prompts, {});
  int exact = 0;
  for (const auto& p : s.prompts) exact += decode_answer(s.model, p) == p.answer_ids;
  EXPECT_EQ(base.count(ErrorCategory::exact), exact);
  EXPECT_EQ(base.total, 16);
  const std::vector<HeadId> heads{{0, 0}, {2, 1}};
  const auto a = zero_ablate_eval(s.model, s.ws, s.samples, s.prompts, heads);
  const auto b = zero_ablate_eval(s.model, s.ws, s.samples, s.prompts, heads, 2);
  EXPECT_EQ(a.counts, b.counts);
}

TEST(RandomHeads, ExcludesAndIsSeeded) {
  const auto cfg = testutil::small_model(50, 4);
  const std::vector<HeadId> ex{{0, 0}, {1, 1}};
  const auto a = random_heads(cfg, 3, ex, 1), b = random_heads(cfg, 3, ex, 1);
  EXPECT_EQ(a, b);
  for (const auto& h : a) EXPECT_EQ(std::find(ex.begin(), ex.end(), h), ex.end());
  EXPECT_THROW(random_heads(cfg, 7, ex, 1), std::invalid_argument);
  bool differs = false;
  for (std::uint64_t s = 2; s < 10 && !differs; ++s) differs = random_heads(cfg, 3, ex, s) != a;
  EXPECT_TRUE(differs);
}
