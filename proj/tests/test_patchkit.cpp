#include <gtest/gtest.h>

#include "tablelab/patchkit.hpp"
#include "test_util.hpp"

using namespace tablelab;

namespace {

struct Bench {
  DatasetConfig dc = testutil::small_dataset();
  Workspace ws{dc, 160};
  std::vector<Sample> samples = generate_samples(dc, ws.pool, "test", SampleMix::atomic, 12);
  std::vector<PatchPair> pairs;
  Model<float> model = testutil::random_model(testutil::small_model(ws.vocab.size()), 5);
  Bench() {
    for (const auto& s : samples) pairs.push_back(make_patch_pair(ws, s));
  }
};

double ld_of(const Model<float>& m, const PatchPair& pp, const PromptInstance& p, const InterventionPlan* plan) {
  ForwardOptions fo;
  fo.plan = plan;
  fo.logit_positions = {p.predict_position()};
  return logit_diff(forward(m, p.token_ids, fo).logits.row(0), pp.gold, pp.foil);
}

}  // namespace

TEST(EffectScore, EndpointsAndAffineInvariance) {
  EXPECT_DOUBLE_EQ(*effect_score(-1.0, 3.0, -1.0), 0.0);
  EXPECT_DOUBLE_EQ(*effect_score(3.0, 3.0, -1.0), 1.0);
  EXPECT_DOUBLE_EQ(*effect_score(1.0, 3.0, -1.0), 0.5);
  Rng rng = make_stream(1, 2);
  for (int i = 0; i < 200; ++i) {
    const double p = uniform_real(rng) * 10 - 5, c = uniform_real(rng) * 10 - 5, k = c + 1 + uniform_real(rng);
    const double a = 0.1 + uniform_real(rng) * 5, b = uniform_real(rng) * 10 - 5;
    EXPECT_NEAR(*effect_score(p, c, k), *effect_score(a * p + b, a * c + b, a * k + b), 1e-9);
  }
  EXPECT_FALSE(effect_score(1.0, 2.0, 2.0005).has_value());
  EXPECT_FALSE(effect_score(1.0, 2.0, 2.001).has_value());
  EXPECT_TRUE(effect_score(1.0, 2.0, 2.01).has_value());
  EXPECT_FALSE(effect_score(1.0, 2.0, 1.5, 1.0).has_value());
  Eigen::VectorXd row(3);
  row << 1.0, 4.0, -2.0;
  EXPECT_DOUBLE_EQ(logit_diff(row, 1, 2), 6.0);
  EXPECT_DOUBLE_EQ(logit_diff(row, 2, 1), -6.0);
}

TEST(ReduceEffects, MeanStdAndExclusions) {
  std::vector<std::optional<Eigen::MatrixXd>> per;
  Eigen::MatrixXd a(1, 2), b(1, 2);
  a << 1.0, 2.0;
  b << 3.0, 6.0;
  per.push_back(a);
  per.push_back(std::nullopt);
  per.push_back(b);
  const auto m = reduce_effects(per, 1, 2);
  EXPECT_EQ(m.total, 3);
  EXPECT_EQ(m.included, 2);
  EXPECT_EQ(m.excluded, 1);
  EXPECT_DOUBLE_EQ(m.mean(0, 0), 2.0);
  EXPECT_DOUBLE_EQ(m.mean(0, 1), 4.0);
  EXPECT_DOUBLE_EQ(m.stddev(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(m.stddev(0, 1), 2.0);
  const auto empty = reduce_effects({std::nullopt}, 2, 2);
  EXPECT_EQ(empty.mean, Eigen::MatrixXd::Zero(2, 2));
}

TEST(PatchPair, AlignmentAndRegions) {
  Bench s;
  for (const auto& pp : s.pairs) {
    EXPECT_EQ(pp.clean.length(), pp.corrupt.length());
    EXPECT_EQ(pp.regions.size(), static_cast<std::size_t>(pp.clean.length()));
    EXPECT_NE(pp.gold, pp.foil);
  }
}

TEST(LayerPatch, TableRegionsAreInertAndFinalRestores) {
  Bench s;
  PatchOptions po;
  const auto m = run_layer_patch(s.model, s.pairs, po);
  ASSERT_EQ(m.mean.rows(), 3);
  ASSERT_EQ(m.mean.cols(), kNumRegions);
  EXPECT_GT(m.included, 0);
  // Everything up to region 11 precedes the first differing token, so clean
  // and corrupt activations coincide there.
  for (int l = 0; l < 3; ++l)
    for (int g = 1; g <= 11; ++g) EXPECT_NEAR(m.mean(l, g - 1), 0.0, 1e-6) << l << "," << g;
  // Region 15 holds the final position: restoring it after the last block
  // reproduces the clean logits.
  EXPECT_NEAR(m.mean(2, 14), 1.0, 1e-3);
  EXPECT_LT(m.stddev(2, 14), 1e-3);

  po.direction = PatchDirection::noise;
  const auto n = run_layer_patch(s.model, s.pairs, po);
  EXPECT_NEAR(n.mean(2, 14), 0.0, 1e-3);
  for (int g = 1; g <= 11; ++g) EXPECT_NEAR(n.mean(1, g - 1), 1.0, 1e-6);
}

// Resume-from-layer results equal a plain full forward with the same edit.
TEST(LayerPatch, MatchesFullForwardOracle) {
  Bench s;
  const auto m = run_layer_patch(s.model, std::span<const PatchPair>(s.pairs).subspan(0, 1));
  const auto& pp = s.pairs[0];
  CapturePlan cp;
  cp.add(HookPoint::resid(2));
  ForwardOptions fo;
  fo.capture = &cp;
  const auto clean = forward(s.model, pp.clean.token_ids, fo);
  const double ldc = ld_of(s.model, pp, pp.clean, nullptr), ldk = ld_of(s.model, pp, pp.corrupt, nullptr);
  const auto pos = region_positions(pp.regions)[14];
  ResidualReplace rr{2, pos, MatF(static_cast<Eigen::Index>(pos.size()), 32)};
  for (std::size_t j = 0; j < pos.size(); ++j) rr.source.row(static_cast<Eigen::Index>(j)) = clean.trace.get("resid.2").row(pos[j]);
  InterventionPlan ip;
  ip.add(rr);
  const double ld = ld_of(s.model, pp, pp.corrupt, &ip);
  EXPECT_NEAR(m.mean(1, 13), *effect_score(ld, ldc, ldk), 1e-4);
}

TEST(HeadPatch, MatchesFullForwardOracle) {
  Bench s;
  const auto pairs = std::span<const PatchPair>(s.pairs).subspan(0, 3);
  const auto m = run_head_patch_last(s.model, pairs);
  ASSERT_EQ(m.mean.rows(), 3);
  ASSERT_EQ(m.mean.cols(), 2);
  Eigen::MatrixXd oracle = Eigen::MatrixXd::Zero(3, 2);
  int n = 0;
  double tol = 0.0;
  for (const auto& pp : pairs) {
    const double ldc = ld_of(s.model, pp, pp.clean, nullptr), ldk = ld_of(s.model, pp, pp.corrupt, nullptr);
    if (!effect_score(0, ldc, ldk)) continue;
    ++n;
    // float logits carry ~1e-5 absolute noise; effects divide it by the denominator
    tol += 1e-5 / std::abs(ldc - ldk);
    CapturePlan cp;
    for (int l = 0; l < 3; ++l)
      for (int h = 0; h < 2; ++h) cp.add(HookPoint::head_out(l, h));
    ForwardOptions fo;
    fo.capture = &cp;
    const auto clean = forward(s.model, pp.clean.token_ids, fo);
    const int last = pp.corrupt.predict_position();
    for (int l = 0; l < 3; ++l)
      for (int h = 0; h < 2; ++h) {
        InterventionPlan ip;
        ip.add(HeadOutputReplace{l, h, {last}, clean.trace.get(HookPoint::head_out(l, h)).row(last)});
        oracle(l, h) += *effect_score(ld_of(s.model, pp, pp.corrupt, &ip), ldc, ldk);
      }
  }
  ASSERT_GT(n, 0);
  oracle /= n;
  EXPECT_LT((m.mean - oracle).cwiseAbs().maxCoeff(), 1e-5 + tol / n);
}

TEST(HeadSetPatch, EmptySetIsNoOp) {
  Bench s;
  std::vector<HeadId> none;
  const auto m0 = run_head_set_patch_last(s.model, s.pairs, none);
  EXPECT_NEAR(m0.mean(0, 0), 0.0, 1e-6);
}

TEST(Patching, DegenerateDenominatorsAreExcluded) {
  Bench s;
  auto flat = s.model;
  flat.w.unembed.setZero();
  const auto m = run_layer_patch(flat, s.pairs);
  EXPECT_EQ(m.included, 0);
  EXPECT_EQ(m.excluded, static_cast<int>(s.pairs.size()));
  EXPECT_EQ(run_head_patch_last(flat, s.pairs).excluded, static_cast<int>(s.pairs.size()));
}

TEST(MoverHeads, ThresholdsAndOrdering) {
  Bench s;
  std::vector<PromptInstance> prompts;
  for (const auto& pp : s.pairs) prompts.push_back(pp.clean);
  EffectMatrix eff;
  eff.mean = Eigen::MatrixXd::Constant(3, 2, 0.5);
  eff.mean(1, 1) = 0.9;
  const auto all = find_mover_heads(s.model, prompts, eff, -1.0, 1.0);
  ASSERT_EQ(all.heads.size(), 6u);
  EXPECT_EQ(all.heads[0].layer, 1);
  EXPECT_EQ(all.heads[0].head, 1);
  EXPECT_TRUE(find_mover_heads(s.model, prompts, eff, 1.0, 0.01).heads.empty());
  eff.mean.setConstant(-0.1);
  EXPECT_TRUE(find_mover_heads(s.model, prompts, eff, -1.0, 0.0).heads.empty());
}

TEST(HeadId, JsonRoundTrip) {
  std::vector<HeadId> h{{0, 1}, {3, 2}};
  EXPECT_EQ(heads_from_json(to_json(h)), h);
}
