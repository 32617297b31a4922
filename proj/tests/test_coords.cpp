#include <gtest/gtest.h>

#include <set>

#include "tablelab/coords.hpp"
#include "test_util.hpp"

using namespace tablelab;

namespace {

struct Bench {
  DatasetConfig dc = testutil::small_dataset();
  Workspace ws{dc, 160};
  std::vector<Sample> samples = generate_samples(dc, ws.pool, "probe", SampleMix::atomic, 20);
  std::vector<PromptInstance> prompts;
  Model<float> model = testutil::random_model(testutil::small_model(ws.vocab.size()), 13);
  Bench() {
    for (const auto& s : samples) prompts.push_back(ws.prompt(s));
  }
};

// Conjugate gradient on the centered normal equations.
Eigen::VectorXd cg_ridge(const Eigen::MatrixXd& X, const Eigen::VectorXd& z, double lambda, double& bias) {
  const Eigen::RowVectorXd mu = X.colwise().mean();
  const Eigen::MatrixXd Xc = X.rowwise() - mu;
  const Eigen::VectorXd zc = z.array() - z.mean();
  auto A = [&](const Eigen::VectorXd& v) { return Eigen::VectorXd(Xc.transpose() * (Xc * v) + lambda * v); };
  Eigen::VectorXd w = Eigen::VectorXd::Zero(X.cols()), r = Xc.transpose() * zc, p = r;
  double rs = r.squaredNorm();
  for (int it = 0; it < 10 * X.cols() && rs > 1e-30; ++it) {
    const Eigen::VectorXd Ap = A(p);
    const double a = rs / p.dot(Ap);
    w += a * p;
    r -= a * Ap;
    const double rs2 = r.squaredNorm();
    p = r + (rs2 / rs) * p;
    rs = rs2;
  }
  bias = z.mean() - mu.dot(w);
  return w;
}

PredictionTrace grid_trace(int rows, int cols, const std::function<double(int, int)>& pred) {
  PredictionTrace t;
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      t.position.push_back(r * cols + c);
      t.r_idx.push_back(r);
      t.c_idx.push_back(c);
      t.predicted.push_back(pred(r, c));
    }
  return t;
}

}  // namespace

TEST(Ridge, MatchesIterativeSolver) {
  Rng rng = make_stream(4, 4);
  std::normal_distribution<double> n(0.0, 1.0);
  double worst = 0;
  for (int trial = 0; trial < 50; ++trial) {
    Eigen::MatrixXd X(200, 32);
    Eigen::VectorXd z(200);
    for (Eigen::Index i = 0; i < X.size(); ++i) X.data()[i] = n(rng);
    for (Eigen::Index i = 0; i < z.size(); ++i) z(i) = n(rng);
    const double lambda = 0.1 + 2.0 * uniform_real(rng);
    const auto p = fit_ridge(X, z, lambda);
    double b = 0;
    const auto w = cg_ridge(X, z, lambda, b);
    worst = std::max({worst, (p.w - w).cwiseAbs().maxCoeff(), std::abs(p.bias - b)});
  }
  EXPECT_LT(worst, 1e-6);
}

TEST(Ridge, RecoversPlantedLinearMap) {
  Rng rng = make_stream(5, 5);
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::MatrixXd X(300, 16);
  for (Eigen::Index i = 0; i < X.size(); ++i) X.data()[i] = n(rng);
  Eigen::VectorXd w(16);
  for (auto& x : w) x = n(rng);
  const Eigen::VectorXd z = (X * w).array() + 0.7;
  const auto p = fit_ridge(X, z, 1e-8);
  EXPECT_GE(p.r2_train, 0.999);
  EXPECT_NEAR(p.bias, 0.7, 1e-4);
  const auto p0 = fit_ridge(X, z, 0.0);
  EXPECT_LT((p0.w - w).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(Ridge, SingularWithoutRegularizationFails) {
  Eigen::MatrixXd X(10, 3);
  X.setRandom();
  X.col(2) = X.col(0);
  Eigen::VectorXd z = Eigen::VectorXd::Random(10);
  EXPECT_THROW(fit_ridge(X, z, 0.0), std::runtime_error);
  EXPECT_NO_THROW(fit_ridge(X, z, 0.5));
  EXPECT_THROW(fit_ridge(X, z, -1.0), std::invalid_argument);
  EXPECT_THROW(fit_ridge(X.topRows(1), z.head(1), 1.0), std::invalid_argument);
}

TEST(RSquared, ConstantTargetAndPerfectFit) {
  const Eigen::VectorXd z = Eigen::VectorXd::Constant(5, 2.0);
  EXPECT_EQ(r_squared(z, Eigen::VectorXd::Zero(5)), 0.0);
  Eigen::VectorXd y(3);
  y << 1, 2, 3;
  EXPECT_DOUBLE_EQ(r_squared(y, y), 1.0);
  EXPECT_DOUBLE_EQ(r_squared(y, Eigen::VectorXd::Constant(3, 2.0)), 0.0);
}

TEST(Normalization, UnitRange) {
  EXPECT_DOUBLE_EQ(normalized_index(0, 5), 0.0);
  EXPECT_DOUBLE_EQ(normalized_index(4, 5), 1.0);
  EXPECT_THROW(normalized_index(0, 1), std::invalid_argument);
  Bench s;
  for (const auto& p : s.prompts) {
    const auto tc = token_coords(p);
    for (int i = p.table.begin; i < p.table.end; ++i)
      for (auto cls : {ProbeClass::cell, ProbeClass::delimiter})
        if (probe_token(tc, i, cls))
          for (auto a : {Axis::row, Axis::column}) {
            const double v = normalized_coord(p, tc, i, a);
            EXPECT_GE(v, 0.0);
            EXPECT_LE(v, 1.0);
          }
  }
}

TEST(Split, DisjointCover) {
  const auto [tr, ev] = split_80_20(53, 3);
  EXPECT_EQ(tr.size(), 42u);
  EXPECT_EQ(ev.size(), 11u);
  std::set<std::size_t> all(tr.begin(), tr.end());
  all.insert(ev.begin(), ev.end());
  EXPECT_EQ(all.size(), 53u);
  EXPECT_EQ(split_80_20(53, 3), split_80_20(53, 3));
}

TEST(ProbeSweep, ShapesAndConstantEmbeddingBaseline) {
  Bench s;
  const auto sw = probe_sweep(s.model, s.prompts, 1.0, 3);
  for (auto a : {Axis::row, Axis::column})
    for (auto c : {ProbeClass::cell, ProbeClass::delimiter}) {
      const auto& curve = sw.get(a, c);
      ASSERT_EQ(curve.probes.size(), 4u);
      for (const auto& p : curve.probes) EXPECT_LE(p.r2_eval, 1.0);
    }
  // Every delimiter shares one embedding, so layer-0 predictions are constant.
  EXPECT_LE(sw.get(Axis::column, ProbeClass::delimiter).probes[0].r2_eval, 1e-9);
  EXPECT_LE(sw.get(Axis::row, ProbeClass::delimiter).probes[0].r2_eval, 1e-9);
  const auto tf = probes_to_tensor_file(sw);
  EXPECT_EQ(tf.meta["kind"], "probes");
  EXPECT_NE(sw.to_csv().find("layer,row_cell"), std::string::npos);
}

TEST(Sawtooth, PerfectReversedAndRandom) {
  const auto perfect = grid_trace(5, 6, [](int r, int c) { return c + 0.01 * r; });
  EXPECT_DOUBLE_EQ(*sawtooth_score(perfect), 1.0);
  const auto rev = grid_trace(5, 6, [](int, int c) { return -c; });
  EXPECT_DOUBLE_EQ(*sawtooth_score(rev), -1.0);
  Rng rng = make_stream(8, 8);
  std::vector<PredictionTrace> random;
  double mean = 0;
  for (int i = 0; i < 50; ++i) {
    random.push_back(grid_trace(5, 6, [&](int, int) { return uniform_real(rng); }));
    mean += *sawtooth_score(random.back());
  }
  EXPECT_LT(std::abs(mean / 50), 0.2);
  std::vector<PredictionTrace> good(10, perfect);
  const auto pt = sawtooth_permutation_test(good, 200, 1);
  EXPECT_DOUBLE_EQ(pt.observed, 1.0);
  EXPECT_LE(pt.p_value, 0.01);
  EXPECT_GT(sawtooth_permutation_test(random, 200, 1).p_value, 0.01);
  EXPECT_FALSE(sawtooth_score(grid_trace(3, 1, [](int, int) { return 0.0; })).has_value());
}

TEST(StepScore, MonotoneRows) {
  EXPECT_DOUBLE_EQ(*step_score(grid_trace(5, 4, [](int r, int) { return r; })), 1.0);
  EXPECT_DOUBLE_EQ(*step_score(grid_trace(5, 4, [](int r, int) { return -r; })), 0.0);
  EXPECT_FALSE(step_score(grid_trace(1, 4, [](int, int c) { return c; })).has_value());
}

TEST(Ranks, TiesAverage) {
  const std::vector<double> v{3.0, 1.0, 3.0, 2.0};
  EXPECT_EQ(average_ranks(v), (std::vector<double>{2.5, 0.0, 2.5, 1.0}));
  const std::vector<double> a{1, 2, 3, 4}, b{10, 20, 25, 100};
  EXPECT_DOUBLE_EQ(spearman(a, b), 1.0);
}

TEST(Interaction, ToeplitzForSharedVectors) {
  Rng rng = make_stream(9, 9);
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::VectorXd q(16), k(16);
  for (auto& x : q) x = n(rng);
  for (auto& x : k) x = n(rng);
  const std::vector<Eigen::VectorXd> qs(6, q), ks(6, k);
  const auto S = interaction_scores(qs, ks, 1, 10000.0);
  for (int j = 0; j + 1 < 6; ++j)
    for (int l = 0; l + 1 < 6; ++l) EXPECT_NEAR(S(j, l), S(j + 1, l + 1), 1e-9);
  for (int j = 0; j < 6; ++j) EXPECT_NEAR(S(j, j), q.dot(k), 1e-9);
  Eigen::MatrixXd D = Eigen::MatrixXd::Zero(3, 3);
  D.diagonal().setConstant(2.0);
  EXPECT_DOUBLE_EQ(diagonal_contrast(D), 2.0);
}

TEST(Interaction, ReportShapes) {
  Bench s;
  const auto rep = rope_interaction(s.model, s.prompts, 3);
  EXPECT_EQ(rep.first_index, 1);
  EXPECT_EQ(rep.last_index, 3);  // four columns minimum -> indices 1..3
  ASSERT_EQ(rep.heads.size(), 6u);
  for (const auto& h : rep.heads) {
    EXPECT_EQ(h.S.rows(), 3);
    EXPECT_NEAR(h.contrast, diagonal_contrast(h.S), 1e-12);
  }
  ASSERT_EQ(rep.selected.size(), 3u);
  auto absc = [&](const HeadId& id) { return std::abs(rep.heads[static_cast<std::size_t>(id.layer * 2 + id.head)].contrast); };
  EXPECT_GE(absc(rep.selected[0]), absc(rep.selected[1]));
}

TEST(HeadProbes, RankingShapes) {
  Bench s;
  const auto rk = head_probe_rank(s.model, s.prompts, 2, 1.0, 1);
  for (auto a : {Axis::row, Axis::column})
    for (auto c : {ProbeClass::cell, ProbeClass::delimiter}) {
      EXPECT_EQ(rk.scores(a, c).rows(), 3);
      EXPECT_EQ(rk.scores(a, c).cols(), 2);
      ASSERT_EQ(rk.selected(a, c).size(), 2u);
      const auto& top = rk.selected(a, c);
      EXPECT_GE(rk.scores(a, c)(top[0].layer, top[0].head), rk.scores(a, c)(top[1].layer, top[1].head));
    }
}

TEST(Swap, MovesOnlyTheIntendedValues) {
  Bench s;
  Rng rng = make_stream(10, 10);
  for (const auto& smp : s.samples)
    for (auto axis : {Axis::row, Axis::column}) {
      const auto sp = make_swap(smp, axis, rng);
      const Table &a = sp.original.table, &b = sp.swapped.table;
      EXPECT_EQ(a.col_headers, b.col_headers);
      EXPECT_EQ(a.row_headers, b.row_headers);
      const int r = smp.query.row_targets[0], c = smp.query.col_targets[0];
      for (int rr = 0; rr < a.rows(); ++rr) {
        EXPECT_EQ(a.at(rr, 0), b.at(rr, 0));
        for (int cc = 1; cc < a.cols(); ++cc) {
          const bool touched = axis == Axis::column ? (cc == c || cc == sp.partner) : (rr == r || rr == sp.partner);
          if (!touched) {
            EXPECT_EQ(a.at(rr, cc), b.at(rr, cc));
          }
        }
      }
      const auto pr = swap_prompts(s.ws, sp);
      EXPECT_EQ(pr.original.token_ids[pr.original_pos], pr.swapped.token_ids[pr.moved_pos]);
      EXPECT_NE(pr.gold, pr.foil);
    }
}

TEST(Swap, EmptyHeadSetHasNoEffect) {
  Bench s;
  Rng rng = make_stream(11, 11);
  std::vector<SwapPrompts> pairs;
  for (const auto& smp : s.samples) pairs.push_back(swap_prompts(s.ws, make_swap(smp, Axis::column, rng)));
  const auto m = delimiter_head_patch(s.model, pairs, {});
  EXPECT_GT(m.included, 0);
  EXPECT_NEAR(m.mean(0, 0), 0.0, 1e-12);
}

TEST(Noise, ZeroAmountEqualsBaseline) {
  Bench s;
  const auto res = noise_eval(s.model, s.ws, s.samples, default_noise_conditions(0));
  ASSERT_EQ(res.names.size(), 5u);
  for (double e : res.em) EXPECT_DOUBLE_EQ(e, res.at("baseline"));
  EXPECT_THROW(res.at("missing"), std::out_of_range);
  EXPECT_EQ(res.n, 20);
}
