#include <gtest/gtest.h>

#include <set>
#include <tuple>

#include "tablelab/tablegen.hpp"

using namespace tablelab;

namespace {

EntityPool small_pool(std::uint64_t seed = 3) { return build_entity_pool(seed, 12, 10, 16); }

}  // namespace

TEST(EntityPool, DisjointAndDeterministic) {
  const auto a = small_pool(), b = small_pool();
  std::set<std::string> seen;
  std::size_t n = 0;
  for (const auto& c : a.categories) {
    seen.insert(c.name);
    ++n;
    for (const auto& v : c.values) seen.insert(v), ++n;
  }
  for (const auto& k : a.key_values) seen.insert(k), ++n;
  EXPECT_EQ(seen.size(), n);
  for (const auto& w : scaffold_words()) EXPECT_EQ(seen.count(w), 0u) << w;
  ASSERT_EQ(a.categories.size(), b.categories.size());
  for (std::size_t i = 0; i < a.categories.size(); ++i) {
    EXPECT_EQ(a.categories[i].name, b.categories[i].name);
    EXPECT_EQ(a.categories[i].values, b.categories[i].values);
  }
  EXPECT_EQ(a.key_values, b.key_values);
  EXPECT_NE(small_pool(4).key_values, a.key_values);
}

TEST(EntityPool, RejectsBadSizes) {
  EXPECT_THROW(build_entity_pool(1, 1, 5), std::invalid_argument);
  EXPECT_THROW(build_entity_pool(1, 5, 0), std::invalid_argument);
  EXPECT_THROW(build_entity_pool(1, 100000, 100), std::invalid_argument);
}

TEST(Table, Invariants) {
  const auto pool = small_pool();
  Rng rng = make_stream(9, 1);
  for (int i = 0; i < 500; ++i) {
    const Table t = generate_table(pool, DimsRange::square(4, 8), rng);
    ASSERT_GE(t.rows(), 4);
    ASSERT_LE(t.rows(), 8);
    ASSERT_GE(t.cols(), 4);
    ASSERT_LE(t.cols(), 8);
    std::set<std::string> headers(t.col_headers.begin(), t.col_headers.end());
    EXPECT_EQ(headers.size(), t.col_headers.size());
    EXPECT_NE(std::find(pool.primary_key_names.begin(), pool.primary_key_names.end(), t.col_headers[0]),
              pool.primary_key_names.end());
    std::set<std::string> keys(t.row_headers.begin(), t.row_headers.end());
    EXPECT_EQ(keys.size(), t.row_headers.size());
    for (int c = 0; c < t.cols(); ++c) {
      std::set<std::string> col;
      for (int r = 0; r < t.rows(); ++r) col.insert(t.at(r, c));
      EXPECT_EQ(static_cast<int>(col.size()), t.rows()) << "duplicate value in column " << c;
    }
    for (int r = 0; r < t.rows(); ++r) EXPECT_EQ(t.at(r, 0), t.row_headers[r]);
  }
}

TEST(Table, NoDuplicateTriplesWithinTable) {
  const auto pool = small_pool();
  Rng rng = make_stream(5, 2);
  for (int i = 0; i < 500; ++i) {
    const Table t = generate_table(pool, DimsRange::square(4, 8), rng);
    std::set<std::tuple<std::string, std::string, std::string>> seen;
    for (int r = 0; r < t.rows(); ++r)
      for (int c = 1; c < t.cols(); ++c) EXPECT_TRUE(seen.insert({t.row_headers[r], t.col_headers[c], t.at(r, c)}).second);
  }
}

TEST(Table, PoolTooSmall) {
  const auto pool = build_entity_pool(1, 3, 3, 3);
  Rng rng = make_stream(1, 1);
  EXPECT_THROW(generate_table(pool, DimsRange::square(6, 6), rng), std::runtime_error);
  EXPECT_THROW(generate_table(pool, {4, 3, 4, 4}, rng), std::invalid_argument);
}

TEST(Query, TargetsAndTemplates) {
  const auto pool = small_pool();
  Rng rng = make_stream(2, 3);
  for (int i = 0; i < 300; ++i) {
    const Table t = generate_table(pool, DimsRange::square(4, 6), rng);
    const auto q = make_query(t, QueryKind::atomic, 1, rng);
    ASSERT_EQ(q.row_targets.size(), 1u);
    ASSERT_EQ(q.col_targets.size(), 1u);
    EXPECT_GE(q.col_targets[0], 1);
    EXPECT_LT(q.col_targets[0], t.cols());
    EXPECT_LT(q.row_targets[0], t.rows());
    const auto mr = make_query(t, QueryKind::multi_row, 3, rng);
    EXPECT_EQ(mr.row_targets.size(), 3u);
    EXPECT_EQ(mr.answer_cells().size(), 3u);
    EXPECT_EQ(std::set<int>(mr.row_targets.begin(), mr.row_targets.end()).size(), 3u);
    const auto mc = make_query(t, QueryKind::multi_col, 2, rng);
    for (int c : mc.col_targets) EXPECT_GE(c, 1);
  }
  EXPECT_THROW(make_query(generate_table(pool, DimsRange::square(4, 4), rng), QueryKind::atomic, 2, rng),
               std::invalid_argument);
  for (const auto& tm : query_templates()) {
    const auto c = std::find(tm.words.begin(), tm.words.end(), "{c}");
    const auto r = std::find(tm.words.begin(), tm.words.end(), "{r}");
    ASSERT_NE(c, tm.words.end());
    ASSERT_NE(r, tm.words.end());
    EXPECT_LT(c, r);
  }
}

TEST(Corruption, FoilDiffersOnRequestedAxis) {
  const auto pool = small_pool();
  Rng rng = make_stream(4, 4);
  for (int i = 0; i < 300; ++i) {
    const Table t = generate_table(pool, DimsRange::square(4, 6), rng);
    const auto q = make_query(t, QueryKind::atomic, 1, rng);
    for (auto axis : {CorruptionAxis::row, CorruptionAxis::column, CorruptionAxis::both}) {
      const auto p = make_corruption(t, q, axis, rng);
      EXPECT_EQ(p.gold, t.at(p.row(), p.col()));
      EXPECT_NE(p.foil, p.gold);
      EXPECT_EQ(p.foil_row() != p.row(), axis != CorruptionAxis::column);
      EXPECT_EQ(p.foil_col() != p.col(), axis != CorruptionAxis::row);
      EXPECT_GE(p.foil_col(), 1);
    }
  }
  QuerySpec multi;
  multi.kind = QueryKind::multi_row;
  EXPECT_THROW(make_corruption(generate_table(pool, DimsRange::square(4, 4), rng), multi, CorruptionAxis::row, rng),
               std::invalid_argument);
}

TEST(Noise, Validation) {
  const auto pool = small_pool();
  Rng rng = make_stream(6, 6);
  const Table t = generate_table(pool, DimsRange::square(4, 4), rng);
  QuerySpec q;
  q.row_targets = {1};
  q.col_targets = {2};
  const auto d = inject_noise(t, q, {NoiseKind::length_filler, NoisePlacement::after_target, 3});
  EXPECT_EQ(d.row, 1);
  EXPECT_EQ(d.col, 2);
  EXPECT_THROW(inject_noise(t, q, {NoiseKind::length_filler, NoisePlacement::after_target, -1}), std::invalid_argument);
  q.col_targets = {0};
  EXPECT_THROW(inject_noise(t, q, {NoiseKind::structural_pipes, NoisePlacement::before_target, 1}),
               std::invalid_argument);
  EXPECT_NO_THROW(inject_noise(t, q, {NoiseKind::structural_pipes, NoisePlacement::before_target, 0}));
  q.row_targets = {9};
  q.col_targets = {1};
  EXPECT_THROW(inject_noise(t, q, {NoiseKind::structural_pipes, NoisePlacement::after_target, 1}), std::out_of_range);
}
