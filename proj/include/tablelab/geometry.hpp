#pragma once

// Column shift vectors: extraction from header pairs, residual steering and
// additive composition.

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "tablelab/coords.hpp"
#include "tablelab/dataset.hpp"
#include "tablelab/model.hpp"
#include "tablelab/parallel.hpp"
#include "tablelab/patchkit.hpp"
#include "tablelab/tensor_file.hpp"

namespace tablelab {

// Middle third of the residual points 1..L-1, at least one layer.
inline std::vector<int> default_steer_window(int n_layers) {
  int lo = std::max(1, n_layers / 3), hi = std::max(lo + 1, (2 * n_layers) / 3);
  hi = std::min(hi, std::max(n_layers, 1));
  std::vector<int> w;
  for (int l = lo; l < hi; ++l) w.push_back(l);
  if (w.empty()) w.push_back(std::min(lo, n_layers));
  return w;
}

// One 2 x d block per layer: rows are the residual differences at t-1 and t.
struct ShiftVector {
  int k = 0;
  std::vector<int> layers;
  std::vector<MatF> vectors;
  int n_samples = 0;
  int n_pairs = 0;

  ShiftVector global_average() const {
    ShiftVector g = *this;
    if (vectors.empty()) return g;
    MatF mean = MatF::Zero(vectors[0].rows(), vectors[0].cols());
    for (const auto& v : vectors) mean += v;
    mean /= static_cast<float>(vectors.size());
    for (auto& v : g.vectors) v = mean;
    return g;
  }

  ShiftVector operator+(const ShiftVector& o) const {
    if (layers != o.layers) throw std::invalid_argument("ShiftVector: windows differ");
    ShiftVector s = *this;
    s.k = k + o.k;
    for (std::size_t i = 0; i < vectors.size(); ++i) s.vectors[i] = vectors[i] + o.vectors[i];
    return s;
  }

  double norm() const {
    double s = 0.0;
    for (const auto& v : vectors) s += static_cast<double>(v.squaredNorm());
    return std::sqrt(s);
  }
};

inline void add_to_tensor_file(TensorFile& f, const ShiftVector& v, const std::string& prefix) {
  for (std::size_t i = 0; i < v.layers.size(); ++i)
    f.add(prefix + ".resid." + std::to_string(v.layers[i]),
          {static_cast<std::uint64_t>(v.vectors[i].rows()), static_cast<std::uint64_t>(v.vectors[i].cols())},
          std::vector<float>(v.vectors[i].data(), v.vectors[i].data() + v.vectors[i].size()));
}

// Positions of the data-column header tokens, indexed by column (entry 0 is
// the key column header).
inline std::vector<int> column_header_positions(const PromptInstance& p) {
  const auto tc = token_coords(p);
  std::vector<int> pos(static_cast<std::size_t>(p.grid_cols), -1);
  for (int i = p.table.begin; i < p.table.end; ++i)
    if (tc.cls[i] == TokenClass::header && tc.r_idx[i] == 0 && tc.c_idx[i] >= 0 && tc.c_idx[i] < p.grid_cols &&
        pos[static_cast<std::size_t>(tc.c_idx[i])] < 0)
      pos[static_cast<std::size_t>(tc.c_idx[i])] = i;
  return pos;
}

// Mean residual difference h(c_{i+k}) - h(c_i) at positions [t-1, t] over
// data-column header pairs, averaged over pairs within a prompt and then
// over prompts.
inline ShiftVector extract_shift_vector(const Model<float>& model, std::span<const PromptInstance> prompts, int k,
                                        const std::vector<int>& window, int threads = 1) {
  if (k == 0) throw std::invalid_argument("extract_shift_vector: k = 0 is the zero vector");
  if (window.empty()) throw std::invalid_argument("extract_shift_vector: empty layer window");
  const int d = model.config.d_model;
  for (int l : window)
    if (l < 0 || l > model.config.n_layers) throw std::out_of_range("extract_shift_vector: layer outside the model");
  CapturePlan plan;
  for (int l : window) plan.add(HookPoint::resid(l));
  std::vector<std::optional<std::vector<MatF>>> per(prompts.size());
  std::vector<int> pairs(prompts.size(), 0);
  parallel_for(prompts.size(), threads, [&](std::size_t i) {
    const auto& p = prompts[i];
    const auto pos = column_header_positions(p);
    std::vector<std::pair<int, int>> pr;
    for (int a = 1; a < p.grid_cols; ++a) {
      const int b = a + k;
      if (b >= 1 && b < p.grid_cols) pr.push_back({pos[static_cast<std::size_t>(a)], pos[static_cast<std::size_t>(b)]});
    }
    if (pr.empty()) return;
    ForwardOptions fo;
    fo.capture = &plan;
    const auto res = forward(model, p.token_ids, fo);
    std::vector<MatF> acc;
    for (int l : window) {
      const MatF& r = res.trace.get(HookPoint::resid(l));
      Eigen::MatrixXd m = Eigen::MatrixXd::Zero(2, d);
      for (auto [a, b] : pr)
        for (int o = 0; o < 2; ++o)
          m.row(o) += (r.row(b - 1 + o).cast<double>() - r.row(a - 1 + o).cast<double>());
      acc.push_back((m / static_cast<double>(pr.size())).cast<float>());
    }
    per[i] = std::move(acc);
    pairs[i] = static_cast<int>(pr.size());
  });
  ShiftVector sv;
  sv.k = k;
  sv.layers = window;
  std::vector<Eigen::MatrixXd> sum(window.size(), Eigen::MatrixXd::Zero(2, d));
  for (std::size_t i = 0; i < per.size(); ++i) {
    if (!per[i]) continue;
    ++sv.n_samples;
    sv.n_pairs += pairs[i];
    for (std::size_t w = 0; w < window.size(); ++w) sum[w] += (*per[i])[w].cast<double>();
  }
  if (sv.n_samples == 0) throw std::invalid_argument("extract_shift_vector: no prompt has a header pair at this distance");
  for (auto& s : sum) sv.vectors.push_back((s / sv.n_samples).cast<float>());
  return sv;
}

// ResidualAdd of multiplier * alpha * v at [t-1, t] for every window layer.
inline InterventionPlan steering_plan(const ShiftVector& v, int anchor, double multiplier, double alpha) {
  InterventionPlan plan;
  const double scale = multiplier * alpha;
  if (scale == 0.0) return plan;
  for (std::size_t i = 0; i < v.layers.size(); ++i)
    for (int o = 0; o < 2; ++o)
      plan.add(ResidualAdd{v.layers[i], {anchor - 1 + o}, MatF(v.vectors[i].row(o) * static_cast<float>(scale))});
  return plan;
}

inline constexpr double kDefaultAlpha = 8.0;

inline MatF steer_forward(const Model<float>& model, const PromptInstance& p, const ShiftVector& v, double multiplier,
                          double alpha = kDefaultAlpha, std::optional<int> anchor = std::nullopt) {
  const int t = anchor ? *anchor : p.span("t_col").begin;
  const auto plan = steering_plan(v, t, multiplier, alpha);
  ForwardOptions fo;
  fo.plan = &plan;
  fo.logit_positions = {p.predict_position()};
  return forward(model, p.token_ids, fo).logits;
}

struct SteerOutcome {
  double ld_base = 0.0, ld_steered = 0.0, ld_ref = 0.0;
  std::optional<double> effect;
};

// LD = logit(v[r, c+k]) - logit(v[r, c]); Effect normalizes the steered run
// between the unsteered run (0) and a run that asks for column c+k (1).
// nullopt when c+k leaves the data columns.
inline std::optional<SteerOutcome> steering_effect(const Model<float>& model, const Workspace& ws, const Sample& s,
                                                   const ShiftVector& v, int k, double multiplier, double alpha = kDefaultAlpha,
                                                   double denom_eps = kDefaultDenomEps) {
  if (s.query.kind != QueryKind::atomic) throw std::invalid_argument("steering_effect: atomic queries only");
  const int r = s.query.row_targets[0], c = s.query.col_targets[0];
  if (c + k < 1 || c + k >= s.table.cols()) return std::nullopt;
  Sample base = s;
  base.corruption.reset();
  base.noise.reset();
  Sample ref = base;
  ref.query.col_targets = {c + k};
  const auto pb = ws.prompt(base);
  const auto pr = ws.prompt(ref);
  const int gold = ws.vocab.id(s.table.at(r, c + k)), orig = ws.vocab.id(s.table.at(r, c));
  ForwardOptions fo;
  fo.logit_positions = {pb.predict_position()};
  SteerOutcome out;
  out.ld_base = logit_diff(forward(model, pb.token_ids, fo).logits.row(0), gold, orig);
  ForwardOptions fr;
  fr.logit_positions = {pr.predict_position()};
  out.ld_ref = logit_diff(forward(model, pr.token_ids, fr).logits.row(0), gold, orig);
  out.ld_steered = logit_diff(steer_forward(model, pb, v, multiplier, alpha).row(0), gold, orig);
  out.effect = effect_score(out.ld_steered, out.ld_ref, out.ld_base, denom_eps);
  return out;
}

struct SteeringSummary {
  int k = 0;
  int total = 0;
  int included = 0;   // in range with a usable denominator
  int excluded = 0;
  int raised = 0;     // samples where the steered LD exceeds the unsteered LD
  int in_range = 0;
  double mean_effect = 0.0;
  double raised_fraction() const { return in_range ? static_cast<double>(raised) / in_range : 0.0; }
};

inline SteeringSummary steering_sweep(const Model<float>& model, const Workspace& ws, std::span<const Sample> samples,
                                      const ShiftVector& v, int k, double multiplier, double alpha = kDefaultAlpha,
                                      int threads = 1) {
  std::vector<std::optional<SteerOutcome>> out(samples.size());
  parallel_for(samples.size(), threads,
               [&](std::size_t i) { out[i] = steering_effect(model, ws, samples[i], v, k, multiplier, alpha); });
  SteeringSummary s;
  s.k = k;
  s.total = static_cast<int>(samples.size());
  double sum = 0.0;
  for (const auto& o : out) {
    if (!o) {
      ++s.excluded;
      continue;
    }
    ++s.in_range;
    if (o->ld_steered > o->ld_base) ++s.raised;
    if (!o->effect) {
      ++s.excluded;
      continue;
    }
    ++s.included;
    sum += *o->effect;
  }
  if (s.included) s.mean_effect = sum / s.included;
  return s;
}

struct CompositionRow {
  int k = 0, a = 0, b = 0;
  double effect = 0.0;
  int n = 0;
  bool composite = false;
};

struct CompositionResult {
  std::vector<CompositionRow> rows;
  std::vector<int> ks;
  std::vector<double> baseline;        // per k
  std::vector<double> composite_mean;  // per k, mean over (a, b)
  double rank_correlation = 0.0;

  std::string to_csv() const {
    std::ostringstream os;
    os.precision(8);
    os << "k,a,b,effect,kind,n\n";
    for (const auto& r : rows)
      os << r.k << ',' << r.a << ',' << r.b << ',' << r.effect << ',' << (r.composite ? "composite" : "baseline") << ','
         << r.n << '\n';
    return os.str();
  }
};

struct CompositionOptions {
  std::vector<int> ks{-3, -2, -1, 1, 2, 3};
  int max_component = 3;
  double alpha = kDefaultAlpha;
  bool global_average = false;
  int threads = 1;
};

// Baseline v_k (multiplier 1) against every composite v_a + v_b with a + b = k.
inline CompositionResult composition_experiment(const Model<float>& model, const Workspace& ws,
                                                std::span<const PromptInstance> extraction, std::span<const Sample> eval,
                                                const std::vector<int>& window, const CompositionOptions& opt = {}) {
  std::map<int, ShiftVector> cache;
  auto vec = [&](int k) -> std::optional<ShiftVector> {
    if (auto it = cache.find(k); it != cache.end()) return it->second;
    try {
      auto v = extract_shift_vector(model, extraction, k, window, opt.threads);
      if (opt.global_average) v = v.global_average();
      cache.emplace(k, v);
      return v;
    } catch (const std::invalid_argument&) {
      return std::nullopt;
    }
  };
  CompositionResult res;
  for (int k : opt.ks) {
    const auto vk = vec(k);
    if (!vk) continue;
    const auto base = steering_sweep(model, ws, eval, *vk, k, 1.0, opt.alpha, opt.threads);
    res.rows.push_back({k, k, 0, base.mean_effect, base.included, false});
    double csum = 0.0;
    int cn = 0;
    for (int a = -opt.max_component; a <= opt.max_component; ++a) {
      const int b = k - a;
      if (a == 0 || b == 0 || std::abs(b) > opt.max_component) continue;
      const auto va = vec(a), vb = vec(b);
      if (!va || !vb) continue;
      const auto comp = steering_sweep(model, ws, eval, *va + *vb, k, 1.0, opt.alpha, opt.threads);
      res.rows.push_back({k, a, b, comp.mean_effect, comp.included, true});
      csum += comp.mean_effect;
      ++cn;
    }
    if (cn == 0) continue;
    res.ks.push_back(k);
    res.baseline.push_back(base.mean_effect);
    res.composite_mean.push_back(csum / cn);
  }
  res.rank_correlation = spearman(res.baseline, res.composite_mean);
  return res;
}

}  // namespace tablelab
