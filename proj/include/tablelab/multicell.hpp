#pragma once

// Multi-row / multi-column queries: evaluation, reuse of atomic alignment
// heads under ablation, and multi-target interaction heatmaps.

#include <algorithm>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "tablelab/binding.hpp"
#include "tablelab/coords.hpp"
#include "tablelab/dataset.hpp"
#include "tablelab/model.hpp"
#include "tablelab/parallel.hpp"

namespace tablelab {

struct MultiCellReport {
  std::string kind;
  int n = 0;
  double em = 0.0;
  std::vector<double> position_accuracy;  // per answer slot
  std::vector<int> position_count;
  ErrorBreakdown breakdown;               // over every (sample, slot)
  std::vector<HeadId> ablated;

  nlohmann::json to_json() const {
    return {{"kind", kind},
            {"n", n},
            {"em", em},
            {"position_accuracy", position_accuracy},
            {"position_count", position_count},
            {"breakdown", breakdown.to_json()},
            {"ablated", tablelab::to_json(ablated)}};
  }
};

// Splits a decoded list answer at commas.
inline std::vector<std::vector<int>> split_answer(std::span<const int> pred) {
  std::vector<std::vector<int>> out(1);
  for (int t : pred) {
    if (t == Vocab::comma) out.emplace_back();
    else out.back().push_back(t);
  }
  return out;
}

// Per-slot categories of a decoded multi-cell answer. Each slot is judged as
// an atomic query on its own answer cell; missing slots are not_in_table.
inline std::vector<ErrorCategory> categorize_slots(std::span<const int> pred, const Vocab& vocab, const Table& table,
                                                   const QuerySpec& q) {
  const auto slots = split_answer(pred);
  const auto cells = q.answer_cells();
  std::vector<ErrorCategory> out;
  for (std::size_t k = 0; k < cells.size(); ++k) {
    if (k >= slots.size()) {
      out.push_back(ErrorCategory::not_in_table);
      continue;
    }
    QuerySpec one;
    one.kind = QueryKind::atomic;
    one.row_targets = {cells[k].first};
    one.col_targets = {cells[k].second};
    one.template_id = q.template_id;
    out.push_back(categorize_output(slots[k], vocab, table, one));
  }
  return out;
}

inline MultiCellReport multicell_eval(const Model<float>& model, const Workspace& ws, std::span<const Sample> samples,
                                      const std::vector<HeadId>& ablate = {}, int threads = 1) {
  MultiCellReport rep;
  rep.ablated = ablate;
  rep.n = static_cast<int>(samples.size());
  if (!samples.empty()) rep.kind = std::string(to_string(samples[0].query.kind));
  const InterventionPlan plan = zero_plan(ablate);
  std::vector<std::vector<ErrorCategory>> cats(samples.size());
  std::vector<char> exact(samples.size(), 0);
  parallel_for(samples.size(), threads, [&](std::size_t i) {
    Sample s = samples[i];
    s.corruption.reset();
    const auto p = ws.prompt(s);
    const auto pred = decode_answer(model, p, ablate.empty() ? nullptr : &plan);
    exact[i] = pred == p.answer_ids ? 1 : 0;
    cats[i] = categorize_slots(pred, ws.vocab, s.table, s.query);
  });
  int hits = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    hits += exact[i];
    for (std::size_t k = 0; k < cats[i].size(); ++k) {
      if (rep.position_accuracy.size() <= k) {
        rep.position_accuracy.resize(k + 1, 0.0);
        rep.position_count.resize(k + 1, 0);
      }
      rep.position_accuracy[k] += cats[i][k] == ErrorCategory::exact ? 1.0 : 0.0;
      ++rep.position_count[k];
      rep.breakdown.add(cats[i][k]);
    }
  }
  for (std::size_t k = 0; k < rep.position_accuracy.size(); ++k)
    if (rep.position_count[k]) rep.position_accuracy[k] /= rep.position_count[k];
  rep.em = samples.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(samples.size());
  return rep;
}

inline MultiCellReport multicell_ablation(const Model<float>& model, const Workspace& ws, std::span<const Sample> samples,
                                          const std::vector<HeadId>& row_alignment_heads, int threads = 1) {
  return multicell_eval(model, ws, samples, row_alignment_heads, threads);
}

struct MultiTargetHeatmap {
  int cardinality = 0;
  int n_prompts = 0;
  int first_index = 1;
  std::vector<HeadId> heads;
  Eigen::MatrixXd S;  // target column j x table column l, averaged over heads
};

// Interaction scores for multi-column prompts: q-bar is built per queried
// column constraint (q_col, q_col.1, ...) with its own target column, and
// k-bar over cells of every column. One matrix per query cardinality,
// averaged over the given heads.
inline std::vector<MultiTargetHeatmap> multicell_rope_heatmap(const Model<float>& model,
                                                              std::span<const PromptInstance> prompts,
                                                              const std::vector<HeadId>& heads, int threads = 1) {
  const int dh = model.config.d_head;
  int max_cols = 0;
  for (const auto& p : prompts) max_cols = std::max(max_cols, p.grid_cols);
  const int first = 1, n_idx = std::max(0, max_cols - 1);
  CapturePlan plan;
  for (const auto& h : heads) {
    plan.add(HookPoint::q_pre(h.layer, h.head));
    plan.add(HookPoint::k_pre(h.layer, h.head));
  }
  struct Acc {
    int card = 0;
    std::vector<Eigen::VectorXd> q, k;
    std::vector<int> nq, nk;
  };
  const std::size_t slots = heads.size() * static_cast<std::size_t>(n_idx);
  std::vector<Acc> per(prompts.size());
  parallel_for(prompts.size(), threads, [&](std::size_t i) {
    const auto& p = prompts[i];
    Acc a;
    a.q.assign(slots, Eigen::VectorXd::Zero(dh));
    a.k = a.q;
    a.nq.assign(slots, 0);
    a.nk.assign(slots, 0);
    const auto tc = token_coords(p);
    std::vector<std::pair<Span, int>> constraints;
    for (std::size_t k = 0; p.has_span(indexed_name("q_col", k)); ++k)
      constraints.push_back({p.span(indexed_name("q_col", k)), tc.c_idx[p.span(indexed_name("t_col", k)).begin]});
    a.card = static_cast<int>(constraints.size());
    ForwardOptions fo;
    fo.capture = &plan;
    const auto res = forward(model, p.token_ids, fo);
    for (std::size_t hi = 0; hi < heads.size(); ++hi) {
      const auto& h = heads[hi];
      const MatF& q = res.trace.get(HookPoint::q_pre(h.layer, h.head));
      const MatF& k = res.trace.get(HookPoint::k_pre(h.layer, h.head));
      const std::size_t base = hi * static_cast<std::size_t>(n_idx);
      for (const auto& [sp, j] : constraints) {
        if (j < first || j >= first + n_idx) continue;
        for (int t = sp.begin; t < sp.end; ++t) {
          a.q[base + static_cast<std::size_t>(j - first)] += q.row(t).cast<double>().transpose();
          ++a.nq[base + static_cast<std::size_t>(j - first)];
        }
      }
      for (int t = p.table.begin; t < p.table.end; ++t) {
        if (tc.cls[t] != TokenClass::cell) continue;
        const int c = tc.c_idx[t];
        if (c < first || c >= first + n_idx) continue;
        a.k[base + static_cast<std::size_t>(c - first)] += k.row(t).cast<double>().transpose();
        ++a.nk[base + static_cast<std::size_t>(c - first)];
      }
    }
    per[i] = std::move(a);
  });
  std::map<int, Acc> by_card;
  std::map<int, int> counts;
  for (const auto& a : per) {
    auto [it, fresh] = by_card.try_emplace(a.card);
    if (fresh) {
      it->second.card = a.card;
      it->second.q.assign(slots, Eigen::VectorXd::Zero(dh));
      it->second.k = it->second.q;
      it->second.nq.assign(slots, 0);
      it->second.nk.assign(slots, 0);
    }
    ++counts[a.card];
    for (std::size_t s = 0; s < slots; ++s) {
      it->second.q[s] += a.q[s];
      it->second.k[s] += a.k[s];
      it->second.nq[s] += a.nq[s];
      it->second.nk[s] += a.nk[s];
    }
  }
  std::vector<MultiTargetHeatmap> out;
  for (const auto& [card, acc] : by_card) {
    MultiTargetHeatmap hm;
    hm.cardinality = card;
    hm.n_prompts = counts[card];
    hm.first_index = first;
    hm.heads = heads;
    hm.S = Eigen::MatrixXd::Zero(n_idx, n_idx);
    for (std::size_t hi = 0; hi < heads.size(); ++hi) {
      std::vector<Eigen::VectorXd> qbar, kbar;
      for (int j = 0; j < n_idx; ++j) {
        const std::size_t s = hi * static_cast<std::size_t>(n_idx) + static_cast<std::size_t>(j);
        qbar.push_back(acc.nq[s] ? Eigen::VectorXd(acc.q[s] / acc.nq[s]) : Eigen::VectorXd::Zero(dh));
        kbar.push_back(acc.nk[s] ? Eigen::VectorXd(acc.k[s] / acc.nk[s]) : Eigen::VectorXd::Zero(dh));
      }
      hm.S += interaction_scores(qbar, kbar, first, model.config.rope_theta);
    }
    if (!heads.empty()) hm.S /= static_cast<double>(heads.size());
    out.push_back(std::move(hm));
  }
  return out;
}

// Column of the largest score in each row of S (ties to the lowest column).
inline std::vector<int> row_argmax(const Eigen::MatrixXd& S) {
  std::vector<int> out;
  for (Eigen::Index r = 0; r < S.rows(); ++r) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < S.cols(); ++c)
      if (S(r, c) > S(r, best)) best = c;
    out.push_back(static_cast<int>(best));
  }
  return out;
}

}  // namespace tablelab
