#pragma once

// Logit differences, Effect Scores, layer x region and layer x head patching
// sweeps, and mover-head identification.

#include <cmath>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "tablelab/dataset.hpp"
#include "tablelab/model.hpp"
#include "tablelab/parallel.hpp"

namespace tablelab {

template <class Row>
double logit_diff(const Row& logits, int gold, int foil) {
  return static_cast<double>(logits(gold)) - static_cast<double>(logits(foil));
}

inline constexpr double kDefaultDenomEps = 1e-3;

// (ld_patch - ld_corrupt) / (ld_clean - ld_corrupt); nullopt when the clean
// and corrupt runs are too close to normalize against.
inline std::optional<double> effect_score(double ld_patch, double ld_clean, double ld_corrupt,
                                          double denom_eps = kDefaultDenomEps) {
  const double denom = ld_clean - ld_corrupt;
  if (!(std::abs(denom) > denom_eps)) return std::nullopt;
  return (ld_patch - ld_corrupt) / denom;
}

struct EffectMatrix {
  std::string title;
  std::vector<std::string> row_labels;
  std::vector<std::string> col_labels;
  Eigen::MatrixXd mean;
  Eigen::MatrixXd stddev;
  int total = 0;     // samples offered
  int included = 0;  // samples with a usable denominator
  int excluded = 0;

  double at(int r, int c) const { return mean(r, c); }

  std::string to_csv() const {
    std::ostringstream os;
    os.precision(8);
    os << "layer";
    for (const auto& c : col_labels) os << ',' << c;
    os << '\n';
    for (Eigen::Index r = 0; r < mean.rows(); ++r) {
      os << row_labels[static_cast<std::size_t>(r)];
      for (Eigen::Index c = 0; c < mean.cols(); ++c) os << ',' << mean(r, c);
      os << '\n';
    }
    return os.str();
  }

  nlohmann::json sidecar() const {
    nlohmann::json sd = nlohmann::json::array();
    for (Eigen::Index r = 0; r < stddev.rows(); ++r) {
      std::vector<double> row(static_cast<std::size_t>(stddev.cols()));
      for (Eigen::Index c = 0; c < stddev.cols(); ++c) row[static_cast<std::size_t>(c)] = stddev(r, c);
      sd.push_back(row);
    }
    return {{"title", title},     {"rows", row_labels}, {"cols", col_labels}, {"total", total},
            {"included", included}, {"excluded", excluded}, {"stddev", sd}};
  }
};

// Deterministic mean / std over per-sample score grids (index order).
inline EffectMatrix reduce_effects(const std::vector<std::optional<Eigen::MatrixXd>>& per_sample, Eigen::Index rows,
                                   Eigen::Index cols) {
  EffectMatrix m;
  m.mean = Eigen::MatrixXd::Zero(rows, cols);
  m.stddev = Eigen::MatrixXd::Zero(rows, cols);
  m.total = static_cast<int>(per_sample.size());
  Eigen::MatrixXd sq = Eigen::MatrixXd::Zero(rows, cols);
  for (const auto& s : per_sample) {
    if (!s) {
      ++m.excluded;
      continue;
    }
    ++m.included;
    m.mean += *s;
    sq += s->cwiseProduct(*s);
  }
  if (m.included > 0) {
    m.mean /= m.included;
    const Eigen::MatrixXd var = (sq / m.included - m.mean.cwiseProduct(m.mean)).cwiseMax(0.0);
    m.stddev = var.cwiseSqrt();
  }
  return m;
}

// Clean / corrupted prompt pair over one table; both sequences are
// position-aligned and differ only in the corrupted query constraint.
struct PatchPair {
  PromptInstance clean;
  PromptInstance corrupt;
  RegionMap regions;
  int gold = 0;
  int foil = 0;
};

inline PatchPair make_patch_pair(const Workspace& ws, const Sample& s) {
  PatchPair p;
  p.clean = ws.prompt(s, true);
  p.corrupt = ws.corrupt_prompt(s);
  if (p.clean.length() != p.corrupt.length() || p.clean.answer_position != p.corrupt.answer_position)
    throw std::runtime_error("patch pair: clean and corrupt prompts are not token-aligned");
  for (int i = 0; i < p.clean.length(); ++i) {
    if (p.clean.token_ids[i] == p.corrupt.token_ids[i]) continue;
    const bool allowed = p.clean.span("q_col").contains(i) || p.clean.span("q_row").contains(i);
    if (!allowed) throw std::runtime_error("patch pair: sequences differ outside the query constraints");
  }
  p.regions = segment_regions(p.clean);
  p.gold = p.clean.answer_ids.at(0);
  p.foil = p.clean.foil_ids.at(0);
  return p;
}

enum class PatchDirection { restore, noise };

struct PatchOptions {
  PatchDirection direction = PatchDirection::restore;
  double denom_eps = kDefaultDenomEps;
  int threads = 1;
};

namespace detail {

struct PairRuns {
  ForwardResult<float> clean, corrupt;
  double ld_clean = 0, ld_corrupt = 0;
};

template <class S>
PairRuns run_pair(const Model<S>& model, const PatchPair& pp, const CapturePlan& plan) {
  static_assert(std::is_same_v<S, float>, "patching sweeps run on f32 models");
  PairRuns r;
  ForwardOptions fo;
  fo.capture = &plan;
  fo.logit_positions = {pp.clean.predict_position()};
  r.clean = forward(model, pp.clean.token_ids, fo);
  r.corrupt = forward(model, pp.corrupt.token_ids, fo);
  r.ld_clean = logit_diff(r.clean.logits.row(0), pp.gold, pp.foil);
  r.ld_corrupt = logit_diff(r.corrupt.logits.row(0), pp.gold, pp.foil);
  return r;
}

}  // namespace detail

// Effect of patching the residual stream of every region at every layer.
// Rows are residual points resid.1 .. resid.L (outputs of each block), columns
// regions 1..15. Restoration writes clean activations into the corrupted run.
inline EffectMatrix run_layer_patch(const Model<float>& model, std::span<const PatchPair> pairs,
                                    const PatchOptions& opts = {}) {
  const int L = model.config.n_layers;
  CapturePlan plan;
  for (int l = 0; l <= L; ++l) plan.add(HookPoint::resid(l));
  std::vector<std::optional<Eigen::MatrixXd>> per(pairs.size());
  parallel_for(pairs.size(), opts.threads, [&](std::size_t i) {
    const PatchPair& pp = pairs[i];
    const auto runs = detail::run_pair(model, pp, plan);
    if (!effect_score(0.0, runs.ld_clean, runs.ld_corrupt, opts.denom_eps)) return;
    const bool restore = opts.direction == PatchDirection::restore;
    const auto& src = restore ? runs.clean : runs.corrupt;
    const auto& dst = restore ? runs.corrupt : runs.clean;
    const auto& dst_prompt = restore ? pp.corrupt : pp.clean;
    const auto regions = region_positions(pp.regions);
    Eigen::MatrixXd grid(L, kNumRegions);
    for (int l = 1; l <= L; ++l) {
      const MatF& src_resid = src.trace.get(HookPoint::resid(l));
      const MatF& dst_resid = dst.trace.get(HookPoint::resid(l));
      for (int g = 1; g <= kNumRegions; ++g) {
        const auto& pos = regions[static_cast<std::size_t>(g)];
        double ld = restore ? runs.ld_corrupt : runs.ld_clean;
        if (!pos.empty()) {
          ResidualReplace rr{l, pos, MatF(static_cast<Eigen::Index>(pos.size()), model.config.d_model)};
          for (std::size_t j = 0; j < pos.size(); ++j) rr.source.row(static_cast<Eigen::Index>(j)) = src_resid.row(pos[j]);
          InterventionPlan ip;
          ip.add(std::move(rr));
          ForwardOptions fo;
          fo.plan = &ip;
          fo.start_layer = l;
          fo.start_resid = &dst_resid;
          fo.logit_positions = {dst_prompt.predict_position()};
          ld = logit_diff(forward(model, dst_prompt.token_ids, fo).logits.row(0), pp.gold, pp.foil);
        }
        grid(l - 1, g - 1) = *effect_score(ld, runs.ld_clean, runs.ld_corrupt, opts.denom_eps);
      }
    }
    per[i] = std::move(grid);
  });
  auto m = reduce_effects(per, L, kNumRegions);
  m.title = "layer x region patching";
  for (int l = 1; l <= L; ++l) m.row_labels.push_back(std::to_string(l));
  for (int g = 1; g <= kNumRegions; ++g) m.col_labels.push_back("r" + std::to_string(g));
  return m;
}

// Effect of patching one head's output at the final input position.
inline EffectMatrix run_head_patch_last(const Model<float>& model, std::span<const PatchPair> pairs,
                                        const PatchOptions& opts = {}) {
  const int L = model.config.n_layers, H = model.config.n_heads;
  CapturePlan plan;
  for (int l = 0; l <= L; ++l) plan.add(HookPoint::resid(l));
  for (int l = 0; l < L; ++l)
    for (int h = 0; h < H; ++h) plan.add(HookPoint::head_out(l, h));
  std::vector<std::optional<Eigen::MatrixXd>> per(pairs.size());
  parallel_for(pairs.size(), opts.threads, [&](std::size_t i) {
    const PatchPair& pp = pairs[i];
    const auto runs = detail::run_pair(model, pp, plan);
    if (!effect_score(0.0, runs.ld_clean, runs.ld_corrupt, opts.denom_eps)) return;
    const int last = pp.corrupt.predict_position();
    Eigen::MatrixXd grid(L, H);
    for (int l = 0; l < L; ++l)
      for (int h = 0; h < H; ++h) {
        HeadOutputReplace hr{l, h, {last}, runs.clean.trace.get(HookPoint::head_out(l, h)).row(last)};
        InterventionPlan ip;
        ip.add(std::move(hr));
        ForwardOptions fo;
        fo.plan = &ip;
        fo.start_layer = l;
        fo.start_resid = &runs.corrupt.trace.get(HookPoint::resid(l));
        fo.logit_positions = {last};
        const double ld = logit_diff(forward(model, pp.corrupt.token_ids, fo).logits.row(0), pp.gold, pp.foil);
        grid(l, h) = *effect_score(ld, runs.ld_clean, runs.ld_corrupt, opts.denom_eps);
      }
    per[i] = std::move(grid);
  });
  auto m = reduce_effects(per, L, H);
  m.title = "layer x head patching at the final position";
  for (int l = 0; l < L; ++l) m.row_labels.push_back(std::to_string(l));
  for (int h = 0; h < H; ++h) m.col_labels.push_back("h" + std::to_string(h));
  return m;
}

struct HeadId {
  int layer = 0;
  int head = 0;
  auto operator<=>(const HeadId&) const = default;
};

inline nlohmann::json to_json(const std::vector<HeadId>& heads) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& h : heads) j.push_back({h.layer, h.head});
  return j;
}

inline std::vector<HeadId> heads_from_json(const nlohmann::json& j) {
  std::vector<HeadId> out;
  for (const auto& e : j) out.push_back({e.at(0).get<int>(), e.at(1).get<int>()});
  return out;
}

// Effect of patching a set of heads simultaneously at the final position.
inline EffectMatrix run_head_set_patch_last(const Model<float>& model, std::span<const PatchPair> pairs,
                                            const std::vector<HeadId>& heads, const PatchOptions& opts = {}) {
  CapturePlan plan;
  for (const auto& h : heads) plan.add(HookPoint::head_out(h.layer, h.head));
  std::vector<std::optional<Eigen::MatrixXd>> per(pairs.size());
  parallel_for(pairs.size(), opts.threads, [&](std::size_t i) {
    const PatchPair& pp = pairs[i];
    const auto runs = detail::run_pair(model, pp, plan);
    if (!effect_score(0.0, runs.ld_clean, runs.ld_corrupt, opts.denom_eps)) return;
    const int last = pp.corrupt.predict_position();
    InterventionPlan ip;
    for (const auto& h : heads)
      ip.add(HeadOutputReplace{h.layer, h.head, {last}, runs.clean.trace.get(HookPoint::head_out(h.layer, h.head)).row(last)});
    ForwardOptions fo;
    fo.plan = &ip;
    fo.logit_positions = {last};
    const double ld = logit_diff(forward(model, pp.corrupt.token_ids, fo).logits.row(0), pp.gold, pp.foil);
    Eigen::MatrixXd one(1, 1);
    one(0, 0) = *effect_score(ld, runs.ld_clean, runs.ld_corrupt, opts.denom_eps);
    per[i] = one;
  });
  auto m = reduce_effects(per, 1, 1);
  m.title = "head set patch";
  m.row_labels = {"all"};
  m.col_labels = {"effect"};
  return m;
}

struct MoverHead {
  int layer = 0;
  int head = 0;
  double effect = 0.0;
  double fraction_attending = 0.0;  // share of samples above the attention threshold
};

struct MoverHeadReport {
  double attn_threshold = 0.0;
  double sample_fraction = 0.7;
  int n_samples = 0;
  std::vector<MoverHead> heads;  // sorted by effect, descending

  nlohmann::json to_json() const {
    nlohmann::json h = nlohmann::json::array();
    for (const auto& m : heads)
      h.push_back({{"layer", m.layer}, {"head", m.head}, {"effect", m.effect}, {"fraction_attending", m.fraction_attending}});
    return {{"attn_threshold", attn_threshold}, {"sample_fraction", sample_fraction}, {"n_samples", n_samples}, {"heads", h}};
  }
};

// Heads with positive final-position Effect whose final-token attention mass
// on the target cell exceeds attn_threshold in at least sample_fraction of
// the prompts.
inline MoverHeadReport find_mover_heads(const Model<float>& model, std::span<const PromptInstance> prompts,
                                        const EffectMatrix& head_effects, double attn_threshold,
                                        double sample_fraction = 0.7, int threads = 1) {
  const int L = model.config.n_layers, H = model.config.n_heads;
  MoverHeadReport rep;
  rep.attn_threshold = attn_threshold;
  rep.sample_fraction = sample_fraction;
  rep.n_samples = static_cast<int>(prompts.size());
  CapturePlan plan;
  for (int l = 0; l < L; ++l)
    for (int h = 0; h < H; ++h) plan.add(HookPoint::attn(l, h));
  std::vector<Eigen::MatrixXi> above(prompts.size());
  parallel_for(prompts.size(), threads, [&](std::size_t i) {
    const auto& p = prompts[i];
    ForwardOptions fo;
    fo.capture = &plan;
    const auto res = forward(model, p.token_ids, fo);
    const Span cell = p.span("t_cell");
    const int last = p.predict_position();
    Eigen::MatrixXi a = Eigen::MatrixXi::Zero(L, H);
    for (int l = 0; l < L; ++l)
      for (int h = 0; h < H; ++h) {
        const MatF& att = res.trace.get(HookPoint::attn(l, h));
        double mass = 0.0;
        for (int j = cell.begin; j < cell.end; ++j) mass += att(last, j);
        a(l, h) = mass > attn_threshold ? 1 : 0;
      }
    above[i] = a;
  });
  Eigen::MatrixXi counts = Eigen::MatrixXi::Zero(L, H);
  for (const auto& a : above) counts += a;
  for (int l = 0; l < L; ++l)
    for (int h = 0; h < H; ++h) {
      const double frac = prompts.empty() ? 0.0 : static_cast<double>(counts(l, h)) / static_cast<double>(prompts.size());
      if (head_effects.mean(l, h) > 0 && frac >= sample_fraction)
        rep.heads.push_back({l, h, head_effects.mean(l, h), frac});
    }
  std::sort(rep.heads.begin(), rep.heads.end(), [](const MoverHead& a, const MoverHead& b) {
    return a.effect != b.effect ? a.effect > b.effect : std::tie(a.layer, a.head) < std::tie(b.layer, b.head);
  });
  return rep;
}

}  // namespace tablelab
