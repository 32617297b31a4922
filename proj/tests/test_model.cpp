#include <gtest/gtest.h>

#include <cmath>

#include "tablelab/model.hpp"
#include "tablelab/train.hpp"

using namespace tablelab;

namespace {

ModelConfig tiny(int L = 2, int vocab = 40) {
  ModelConfig c;
  c.n_layers = L;
  c.n_heads = 2;
  c.d_model = 16;
  c.d_head = 8;
  c.d_mlp = 24;
  c.vocab_size = vocab;
  c.max_seq_len = 32;
  return c;
}

// Perturbs norm gains away from one so their gradients are exercised.
template <class S>
Model<S> random_model(const ModelConfig& c, std::uint64_t seed, double scale = 0.3) {
  auto m = init_model<S>(c, seed);
  Rng rng = make_stream(seed, 99);
  std::normal_distribution<double> n(0.0, 1.0);
  m.w.visit([&](const std::string&, std::string_view fam, Mat<S>& t) {
    for (Eigen::Index i = 0; i < t.size(); ++i)
      t.data()[i] = is_norm_family(fam) ? static_cast<S>(1.0 + 0.2 * n(rng)) : static_cast<S>(scale * n(rng));
  });
  return m;
}

std::vector<int> random_tokens(int n, int vocab, std::uint64_t seed) {
  Rng rng = make_stream(seed, 5);
  std::vector<int> t(static_cast<std::size_t>(n));
  for (auto& x : t) x = static_cast<int>(uniform_index(rng, static_cast<std::size_t>(vocab)));
  return t;
}

using MatD = Eigen::MatrixXd;

MatD rms(const MatD& x, const Mat<double>& g, double eps) {
  MatD o = x;
  for (Eigen::Index t = 0; t < x.rows(); ++t) {
    double ms = 0;
    for (Eigen::Index j = 0; j < x.cols(); ++j) ms += x(t, j) * x(t, j);
    ms /= static_cast<double>(x.cols());
    for (Eigen::Index j = 0; j < x.cols(); ++j) o(t, j) = x(t, j) / std::sqrt(ms + eps) * g(0, j);
  }
  return o;
}

// Loop-level forward written from the architecture description. Heads in
// `zeroed` contribute nothing.
MatD reference_logits(const Model<double>& m, const std::vector<int>& tok,
                      const std::set<std::pair<int, int>>& zeroed = {}) {
  const auto& c = m.config;
  const int T = static_cast<int>(tok.size()), d = c.d_model, dh = c.d_head;
  MatD x(T, d);
  for (int t = 0; t < T; ++t) x.row(t) = m.w.embed.row(tok[t]);
  for (int l = 0; l < c.n_layers; ++l) {
    const auto& L = m.w.layers[l];
    const MatD a = rms(x, L.attn_norm, c.norm_eps);
    const MatD q = a * L.wq, k = a * L.wk, v = a * L.wv;
    MatD attn_out = MatD::Zero(T, d);
    for (int h = 0; h < c.n_heads; ++h) {
      if (zeroed.count({l, h})) continue;
      std::vector<std::vector<double>> qr(T), kr(T);
      for (int t = 0; t < T; ++t) {
        std::vector<double> qs(dh), ks(dh);
        for (int j = 0; j < dh; ++j) qs[j] = q(t, h * dh + j), ks[j] = k(t, h * dh + j);
        qr[t] = rope_apply<double>(qs, t, c.rope_theta);
        kr[t] = rope_apply<double>(ks, t, c.rope_theta);
      }
      for (int t = 0; t < T; ++t) {
        std::vector<double> s(t + 1);
        double mx = -1e300;
        for (int u = 0; u <= t; ++u) {
          double dot = 0;
          for (int j = 0; j < dh; ++j) dot += qr[t][j] * kr[u][j];
          s[u] = dot / std::sqrt(static_cast<double>(dh));
          mx = std::max(mx, s[u]);
        }
        double z = 0;
        for (auto& e : s) z += (e = std::exp(e - mx));
        Eigen::RowVectorXd zv = Eigen::RowVectorXd::Zero(dh);
        for (int u = 0; u <= t; ++u) zv += s[u] / z * v.block(u, h * dh, 1, dh);
        attn_out.row(t) += zv * L.wo.middleRows(h * dh, dh);
      }
    }
    x += attn_out;
    const MatD mm = rms(x, L.mlp_norm, c.norm_eps);
    MatD g = mm * L.w_gate, u = mm * L.w_up;
    for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = g.data()[i] / (1 + std::exp(-g.data()[i])) * u.data()[i];
    x += g * L.w_down;
  }
  return rms(x, m.w.final_norm, c.norm_eps) * m.w.unembed;
}

}  // namespace

TEST(Rope, IdentityHoldsToPrecision) {
  Rng rng = make_stream(1, 1);
  std::normal_distribution<double> n(0.0, 1.0);
  double worst = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int dh = 2 * (1 + static_cast<int>(uniform_index(rng, 32)));
    std::vector<double> q(dh), k(dh);
    for (auto& x : q) x = n(rng);
    for (auto& x : k) x = n(rng);
    const int p = static_cast<int>(uniform_index(rng, 512)), s = static_cast<int>(uniform_index(rng, 512));
    const auto qp = rope_apply<double>(q, p, 10000.0), ks = rope_apply<double>(k, s, 10000.0);
    const auto k_rel = rope_apply<double>(k, s - p, 10000.0);
    double lhs = 0, rhs = 0, scale = 0;
    for (int i = 0; i < dh; ++i) lhs += qp[i] * ks[i], rhs += q[i] * k_rel[i], scale += std::abs(q[i] * k[i]);
    worst = std::max(worst, std::abs(lhs - rhs) / std::max(1.0, scale));
  }
  EXPECT_LT(worst, 1e-9);
  std::vector<double> v{1.0, 2.0, 3.0, 4.0};
  EXPECT_EQ(rope_apply<double>(v, 0, 10000.0), v);
  EXPECT_THROW(rope_apply<double>(std::vector<double>{1.0, 2.0, 3.0}, 1, 10000.0), std::invalid_argument);
}

TEST(Forward, MatchesLoopReference) {
  const auto m = random_model<double>(tiny(3), 4);
  const auto tok = random_tokens(20, 40, 2);
  ForwardOptions fo;
  CapturePlan cp;
  cp.add(HookPoint::logits());
  fo.capture = &cp;
  const auto res = forward(m, tok, fo);
  const MatD ref = reference_logits(m, tok);
  const auto all = res.trace.get("logits").cast<double>();
  EXPECT_LT((all - ref).cwiseAbs().maxCoeff(), 1e-4);  // trace is stored in f32
  EXPECT_LT((MatD(res.logits.row(0)) - ref.row(19)).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Forward, HeadZeroMatchesReferenceWithHeadRemoved) {
  const auto m = random_model<double>(tiny(2), 5);
  const auto tok = random_tokens(16, 40, 3);
  InterventionPlan plan;
  plan.add(HeadZero{0, 1}).add(HeadZero{1, 0});
  ForwardOptions fo;
  fo.plan = &plan;
  fo.logit_positions = {3, 15};
  const auto res = forward(m, tok, fo);
  const MatD ref = reference_logits(m, tok, {{0, 1}, {1, 0}});
  EXPECT_LT((MatD(res.logits.row(0)) - ref.row(3)).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_LT((MatD(res.logits.row(1)) - ref.row(15)).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Forward, HeadOutputsSumToAttentionAndResumeIsExact) {
  const auto m = random_model<float>(tiny(3), 6, 0.2);
  const auto tok = random_tokens(18, 40, 4);
  CapturePlan cp;
  for (int l = 0; l <= 3; ++l) cp.add(HookPoint::resid(l));
  for (int h = 0; h < 2; ++h) cp.add(HookPoint::head_out(1, h)).add(HookPoint::attn(1, h));
  ForwardOptions fo;
  fo.capture = &cp;
  const auto full = forward(m, tok, fo);
  for (int h = 0; h < 2; ++h) {
    const MatF& a = full.trace.get(HookPoint::attn(1, h));
    for (int t = 0; t < 18; ++t) {
      EXPECT_NEAR(a.row(t).sum(), 1.0f, 1e-5);
      for (int u = t + 1; u < 18; ++u) EXPECT_EQ(a(t, u), 0.0f);
    }
  }
  for (int l = 0; l <= 3; ++l) {
    ForwardOptions r;
    r.start_layer = l;
    r.start_resid = &full.trace.get(HookPoint::resid(l));
    const auto res = forward(m, tok, r);
    EXPECT_LT((res.logits - full.logits).cwiseAbs().maxCoeff(), 1e-4) << "resume at " << l;
  }
  // Self replacement is a no-op.
  InterventionPlan plan;
  plan.add(ResidualReplace{2, {0, 5, 17}, MatF(3, 16)});
  auto& rr = std::get<ResidualReplace>(plan.edits[0]);
  for (int j = 0; j < 3; ++j) rr.source.row(j) = full.trace.get(HookPoint::resid(2)).row(rr.positions[j]);
  plan.add(HeadOutputReplace{1, 0, {4}, full.trace.get(HookPoint::head_out(1, 0)).row(4)});
  ForwardOptions pf;
  pf.plan = &plan;
  const auto patched = forward(m, tok, pf);
  EXPECT_LT((patched.logits - full.logits).cwiseAbs().maxCoeff(), 1e-5);
}

TEST(Forward, ResidualAddIsLinearAndZeroIsIdentity) {
  const auto m = random_model<double>(tiny(2), 7, 0.2);
  const auto tok = random_tokens(12, 40, 5);
  CapturePlan cp;
  cp.add(HookPoint::resid(2));
  ForwardOptions base;
  base.capture = &cp;
  const auto clean = forward(m, tok, base);
  InterventionPlan zero;
  zero.add(ResidualAdd{1, {3, 7}, MatF::Zero(1, 16)});
  ForwardOptions zf;
  zf.plan = &zero;
  zf.capture = &cp;
  const auto z = forward(m, tok, zf);
  EXPECT_EQ(clean.trace.get(HookPoint::resid(2)), z.trace.get(HookPoint::resid(2)));
  EXPECT_EQ(clean.logits, z.logits);

  // Two adds at the last layer combine like one add of the sum.
  MatF a = MatF::Random(1, 16), b = MatF::Random(1, 16);
  InterventionPlan two, one;
  two.add(ResidualAdd{2, {11}, a}).add(ResidualAdd{2, {11}, b});
  one.add(ResidualAdd{2, {11}, a + b});
  ForwardOptions f2, f1;
  f2.plan = &two;
  f1.plan = &one;
  EXPECT_LT((forward(m, tok, f2).logits - forward(m, tok, f1).logits).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Intervention, RejectsInvalidEdits) {
  const auto m = random_model<float>(tiny(2), 8);
  const auto tok = random_tokens(10, 40, 6);
  auto run = [&](Edit e) {
    InterventionPlan p;
    p.add(std::move(e));
    ForwardOptions fo;
    fo.plan = &p;
    return forward(m, tok, fo);
  };
  EXPECT_THROW(run(HeadZero{2, 0}), std::out_of_range);
  EXPECT_THROW(run(HeadZero{0, 2}), std::out_of_range);
  EXPECT_THROW(run(ResidualAdd{0, {10}, MatF::Zero(1, 16)}), std::out_of_range);
  EXPECT_THROW(run(ResidualAdd{0, {1}, MatF::Zero(1, 15)}), std::invalid_argument);
  EXPECT_THROW(run(ResidualReplace{3, {1}, MatF::Zero(1, 16)}), std::out_of_range);
  EXPECT_THROW(run(ResidualReplace{1, {1, 1}, MatF::Zero(2, 16)}), std::invalid_argument);
  EXPECT_THROW(run(HeadOutputReplace{0, 0, {1}, MatF::Zero(2, 16)}), std::invalid_argument);
  EXPECT_THROW(forward(m, std::vector<int>{1, 99}), std::out_of_range);
  EXPECT_THROW(forward(m, std::vector<int>(40, 1)), std::length_error);
}

TEST(HookPoint, NamesRoundTrip) {
  for (const auto& h : {HookPoint::resid(3), HookPoint::head_out(2, 1), HookPoint::attn(0, 3), HookPoint::q_pre(1, 2),
                        HookPoint::k_pre(4, 0), HookPoint::logits()})
    EXPECT_EQ(HookPoint::parse(h.name()), h);
  EXPECT_THROW(HookPoint::parse("resid"), std::invalid_argument);
  EXPECT_THROW(HookPoint::parse("attn.1"), std::invalid_argument);
  EXPECT_THROW(HookPoint::parse("mlp.1"), std::invalid_argument);
}

TEST(Backward, FiniteDifferenceCheck) {
  const auto m = random_model<double>(tiny(2), 9, 0.2);
  std::vector<TrainExample> batch;
  for (int i = 0; i < 2; ++i) {
    TrainExample ex;
    ex.tokens = random_tokens(14, 40, 10 + i);
    for (int t = 4; t < 13; ++t) ex.targets.push_back({t, ex.tokens[t + 1], t % 3 == 0 ? 2.0 : 1.0});
    batch.push_back(ex);
  }
  // 20 families (embed, 9 per layer, final norm, unembed) x 12 coordinates.
  const auto rep = grad_check(m, batch, 1e-6, 12, 3);
  EXPECT_GE(rep.n_checked, 200);
  EXPECT_LT(rep.max_rel_err, 1e-4);
  for (const auto& [fam, err] : rep.family_max_rel_err) EXPECT_LT(err, 1e-4) << fam;
}

TEST(Checkpoint, RoundTrip) {
  const auto m = random_model<float>(tiny(2), 11);
  const std::string path = ::testing::TempDir() + "/m.tbls";
  save_model(path, m, {{"note", "x"}});
  const auto back = load_model<float>(path);
  const auto tok = random_tokens(9, 40, 1);
  EXPECT_EQ(forward(m, tok).logits, forward(back, tok).logits);
  EXPECT_EQ(back.config.n_layers, 2);
}
