#pragma once

// Query-to-header binding: representation similarity, alignment heads, zero
// ablation and the output error taxonomy.

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "tablelab/dataset.hpp"
#include "tablelab/model.hpp"
#include "tablelab/parallel.hpp"
#include "tablelab/patchkit.hpp"
#include "tablelab/rng.hpp"
#include "tablelab/train.hpp"

namespace tablelab {

enum class Axis { row, column };

inline std::string_view to_string(Axis a) { return a == Axis::row ? "row" : "column"; }
inline Axis axis_from_string(std::string_view s) {
  if (s == "row") return Axis::row;
  if (s == "column") return Axis::column;
  throw std::invalid_argument("unknown axis: " + std::string(s));
}

// Header tokens that compete for a query constraint: column headers of the
// data columns, or the row keys of the data rows.
struct HeaderCandidates {
  std::vector<int> positions;  // token positions, ascending
  int gold = -1;               // index into positions
};

inline HeaderCandidates header_candidates(const PromptInstance& p, const TokenCoords& tc, Axis axis, int k = 0) {
  HeaderCandidates hc;
  const Span gold = p.span(indexed_name(axis == Axis::row ? "t_row" : "t_col", static_cast<std::size_t>(k)));
  for (int i = p.table.begin; i < p.table.end; ++i) {
    if (tc.cls[i] != TokenClass::header) continue;
    const bool take = axis == Axis::column ? (tc.r_idx[i] == 0 && tc.c_idx[i] >= 1) : (tc.c_idx[i] == 0 && tc.r_idx[i] >= 1);
    if (!take) continue;
    if (gold.contains(i)) hc.gold = static_cast<int>(hc.positions.size());
    hc.positions.push_back(i);
  }
  if (hc.gold < 0) throw std::logic_error("header_candidates: gold header not among candidates");
  return hc;
}

inline Span constraint_span(const PromptInstance& p, Axis axis, int k = 0) {
  return p.span(indexed_name(axis == Axis::row ? "q_row" : "q_col", static_cast<std::size_t>(k)));
}

struct SimilarityAccuracy {
  std::vector<double> row, column;  // per residual point 0..L
  std::vector<int> n_row, n_column;
  int excluded = 0;                 // zero-norm comparisons

  std::string to_csv() const {
    std::ostringstream os;
    os.precision(8);
    os << "layer,row_acc,column_acc,n_row,n_column\n";
    for (std::size_t l = 0; l < row.size(); ++l)
      os << l << ',' << row[l] << ',' << column[l] << ',' << n_row[l] << ',' << n_column[l] << '\n';
    return os.str();
  }
};

// Index of the candidate most cosine-similar to `query`; the earliest
// candidate wins ties. nullopt on a zero-norm vector.
inline std::optional<int> most_similar(const Eigen::RowVectorXd& query, const std::vector<Eigen::RowVectorXd>& cands) {
  const double qn = query.norm();
  if (qn == 0.0) return std::nullopt;
  int best = -1;
  double best_sim = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < cands.size(); ++i) {
    const double cn = cands[i].norm();
    if (cn == 0.0) return std::nullopt;
    const double sim = query.dot(cands[i]) / (qn * cn);
    if (sim > best_sim) {
      best_sim = sim;
      best = static_cast<int>(i);
    }
  }
  return best;
}

inline Eigen::RowVectorXd span_mean(const MatF& resid, const Span& s) {
  Eigen::RowVectorXd v = Eigen::RowVectorXd::Zero(resid.cols());
  for (int i = s.begin; i < s.end; ++i) v += resid.row(i).cast<double>();
  return v / static_cast<double>(s.end - s.begin);
}

inline SimilarityAccuracy header_similarity_accuracy(const Model<float>& model, std::span<const PromptInstance> prompts,
                                                     int threads = 1) {
  const int L = model.config.n_layers;
  CapturePlan plan;
  for (int l = 0; l <= L; ++l) plan.add(HookPoint::resid(l));
  // per prompt, per layer, per axis: 1 hit, 0 miss, -1 excluded
  std::vector<std::vector<std::array<int, 2>>> out(prompts.size());
  parallel_for(prompts.size(), threads, [&](std::size_t i) {
    const auto& p = prompts[i];
    ForwardOptions fo;
    fo.capture = &plan;
    const auto res = forward(model, p.token_ids, fo);
    const auto tc = token_coords(p);
    auto& o = out[i];
    o.assign(static_cast<std::size_t>(L + 1), {-1, -1});
    for (int a = 0; a < 2; ++a) {
      const Axis axis = a == 0 ? Axis::row : Axis::column;
      const auto hc = header_candidates(p, tc, axis);
      const Span q = constraint_span(p, axis);
      for (int l = 0; l <= L; ++l) {
        const MatF& r = res.trace.get(HookPoint::resid(l));
        std::vector<Eigen::RowVectorXd> cands;
        for (int pos : hc.positions) cands.push_back(span_mean(r, Span{pos, pos + 1}));
        const auto best = most_similar(span_mean(r, q), cands);
        o[static_cast<std::size_t>(l)][static_cast<std::size_t>(a)] = best ? (*best == hc.gold ? 1 : 0) : -1;
      }
    }
  });
  SimilarityAccuracy acc;
  acc.row.assign(static_cast<std::size_t>(L + 1), 0.0);
  acc.column = acc.row;
  acc.n_row.assign(static_cast<std::size_t>(L + 1), 0);
  acc.n_column = acc.n_row;
  for (const auto& o : out)
    for (int l = 0; l <= L; ++l)
      for (int a = 0; a < 2; ++a) {
        const int v = o[static_cast<std::size_t>(l)][static_cast<std::size_t>(a)];
        if (v < 0) {
          ++acc.excluded;
          continue;
        }
        auto& sum = a == 0 ? acc.row : acc.column;
        auto& n = a == 0 ? acc.n_row : acc.n_column;
        sum[static_cast<std::size_t>(l)] += v;
        ++n[static_cast<std::size_t>(l)];
      }
  for (int l = 0; l <= L; ++l) {
    const auto s = static_cast<std::size_t>(l);
    if (acc.n_row[s]) acc.row[s] /= acc.n_row[s];
    if (acc.n_column[s]) acc.column[s] /= acc.n_column[s];
  }
  return acc;
}

// Alignment Score of one head for one prompt: over the constraint tokens,
// attention mass on the gold header minus the mean mass on the other headers.
inline std::optional<double> alignment_score(const MatF& attn, const Span& constraint, const HeaderCandidates& hc) {
  if (hc.positions.size() < 2) return std::nullopt;
  double total = 0.0;
  for (int i = constraint.begin; i < constraint.end; ++i) {
    double tgt = 0.0, dist = 0.0;
    for (std::size_t c = 0; c < hc.positions.size(); ++c) {
      const double m = attn(i, hc.positions[c]);
      if (static_cast<int>(c) == hc.gold) tgt += m;
      else dist += m;
    }
    total += tgt - dist / static_cast<double>(hc.positions.size() - 1);
  }
  return total / static_cast<double>(constraint.end - constraint.begin);
}

struct HeadScoreTable {
  Axis axis = Axis::row;
  Eigen::MatrixXd score;  // L x A
  int n_samples = 0;
  int excluded = 0;
  std::vector<HeadId> selected;

  std::string to_csv() const {
    std::ostringstream os;
    os.precision(8);
    os << "layer,head,score\n";
    for (Eigen::Index l = 0; l < score.rows(); ++l)
      for (Eigen::Index h = 0; h < score.cols(); ++h) os << l << ',' << h << ',' << score(l, h) << '\n';
    return os.str();
  }
};

inline std::vector<HeadId> top_heads(const Eigen::MatrixXd& score, int k) {
  std::vector<HeadId> all;
  for (int l = 0; l < score.rows(); ++l)
    for (int h = 0; h < score.cols(); ++h) all.push_back({l, h});
  std::stable_sort(all.begin(), all.end(),
                   [&](const HeadId& a, const HeadId& b) { return score(a.layer, a.head) > score(b.layer, b.head); });
  all.resize(std::min<std::size_t>(all.size(), static_cast<std::size_t>(std::max(k, 0))));
  return all;
}

inline HeadScoreTable alignment_heads(const Model<float>& model, std::span<const PromptInstance> prompts, Axis axis,
                                      int top_k = 20, int threads = 1) {
  const int L = model.config.n_layers, H = model.config.n_heads;
  CapturePlan plan;
  for (int l = 0; l < L; ++l)
    for (int h = 0; h < H; ++h) plan.add(HookPoint::attn(l, h));
  std::vector<std::optional<Eigen::MatrixXd>> per(prompts.size());
  parallel_for(prompts.size(), threads, [&](std::size_t i) {
    const auto& p = prompts[i];
    const auto hc = header_candidates(p, token_coords(p), axis);
    if (hc.positions.size() < 2) return;
    ForwardOptions fo;
    fo.capture = &plan;
    const auto res = forward(model, p.token_ids, fo);
    const Span q = constraint_span(p, axis);
    Eigen::MatrixXd s(L, H);
    for (int l = 0; l < L; ++l)
      for (int h = 0; h < H; ++h) s(l, h) = *alignment_score(res.trace.get(HookPoint::attn(l, h)), q, hc);
    per[i] = std::move(s);
  });
  const auto red = reduce_effects(per, L, H);
  HeadScoreTable t;
  t.axis = axis;
  t.score = red.mean;
  t.n_samples = red.included;
  t.excluded = red.excluded;
  t.selected = top_heads(t.score, top_k);
  return t;
}

// ---------------------------------------------------------------------------
// Error taxonomy

enum class ErrorCategory { exact, row_header, column_header, wrong_row, wrong_column, wrong_row_and_column, not_in_table };

inline constexpr std::array<ErrorCategory, 7> kErrorCategories{
    ErrorCategory::exact,        ErrorCategory::row_header,           ErrorCategory::column_header,
    ErrorCategory::wrong_row,    ErrorCategory::wrong_column,         ErrorCategory::wrong_row_and_column,
    ErrorCategory::not_in_table};

inline std::string_view to_string(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::exact: return "exact";
    case ErrorCategory::row_header: return "row_header";
    case ErrorCategory::column_header: return "column_header";
    case ErrorCategory::wrong_row: return "wrong_row";
    case ErrorCategory::wrong_column: return "wrong_column";
    case ErrorCategory::wrong_row_and_column: return "wrong_row_and_column";
    case ErrorCategory::not_in_table: return "not_in_table";
  }
  return "?";
}

struct ErrorBreakdown {
  std::array<int, 7> counts{};
  int total = 0;

  void add(ErrorCategory c) {
    ++counts[static_cast<std::size_t>(c)];
    ++total;
  }
  int count(ErrorCategory c) const { return counts[static_cast<std::size_t>(c)]; }
  double share(ErrorCategory c) const { return total ? static_cast<double>(count(c)) / total : 0.0; }
  double em() const { return share(ErrorCategory::exact); }

  nlohmann::json to_json() const {
    nlohmann::json j{{"total", total}};
    for (auto c : kErrorCategories) j[std::string(to_string(c))] = count(c);
    return j;
  }
};

// Classifies a decoded answer against an atomic query. Header words other
// than the queried row key and column header count as not_in_table.
inline ErrorCategory categorize_output(std::span<const int> pred, const Vocab& vocab, const Table& table,
                                       const QuerySpec& q) {
  const auto gold = detail::answer_tokens(vocab, table, q);
  if (std::equal(pred.begin(), pred.end(), gold.begin(), gold.end())) return ErrorCategory::exact;
  if (pred.size() != 1) return ErrorCategory::not_in_table;
  const int r = q.row_targets.at(0), c = q.col_targets.at(0);
  const std::string& w = vocab.word(pred[0]);
  if (w == table.row_headers.at(r)) return ErrorCategory::row_header;
  if (w == table.col_headers.at(c)) return ErrorCategory::column_header;
  for (int rr = 0; rr < table.rows(); ++rr)
    for (int cc = 1; cc < table.cols(); ++cc) {
      if (table.at(rr, cc) != w) continue;
      if (cc == c && rr != r) return ErrorCategory::wrong_row;
      if (rr == r && cc != c) return ErrorCategory::wrong_column;
      if (rr != r && cc != c) return ErrorCategory::wrong_row_and_column;
    }
  return ErrorCategory::not_in_table;
}

inline InterventionPlan zero_plan(const std::vector<HeadId>& heads) {
  InterventionPlan plan;
  for (const auto& h : heads) plan.add(HeadZero{h.layer, h.head});
  return plan;
}

// Greedy decode of atomic prompts with the given heads zeroed.
inline ErrorBreakdown zero_ablate_eval(const Model<float>& model, const Workspace& ws, std::span<const Sample> samples,
                                       std::span<const PromptInstance> prompts, const std::vector<HeadId>& heads,
                                       int threads = 1) {
  if (samples.size() != prompts.size()) throw std::invalid_argument("zero_ablate_eval: sample/prompt count mismatch");
  const InterventionPlan plan = zero_plan(heads);
  std::vector<ErrorCategory> cat(prompts.size());
  parallel_for(prompts.size(), threads, [&](std::size_t i) {
    const auto pred = decode_answer(model, prompts[i], &plan);
    cat[i] = categorize_output(pred, ws.vocab, samples[i].table, samples[i].query);
  });
  ErrorBreakdown b;
  for (auto c : cat) b.add(c);
  return b;
}

// k heads drawn uniformly from those not in `exclude`.
inline std::vector<HeadId> random_heads(const ModelConfig& cfg, int k, const std::vector<HeadId>& exclude,
                                        std::uint64_t seed) {
  std::vector<HeadId> pool;
  for (int l = 0; l < cfg.n_layers; ++l)
    for (int h = 0; h < cfg.n_heads; ++h)
      if (std::find(exclude.begin(), exclude.end(), HeadId{l, h}) == exclude.end()) pool.push_back({l, h});
  if (k > static_cast<int>(pool.size())) throw std::invalid_argument("random_heads: not enough heads outside the exclusion set");
  Rng rng = make_stream(seed, 0x4ead5);
  const auto idx = sample_without_replacement(rng, pool.size(), static_cast<std::size_t>(k));
  std::vector<HeadId> out;
  for (auto i : idx) out.push_back(pool[i]);
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace tablelab
