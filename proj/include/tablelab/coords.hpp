#pragma once

// Coordinate probes, prediction traces, RoPE interaction scores, head-probe
// ranking, delimiter-head patching and noise evaluation.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "tablelab/binding.hpp"
#include "tablelab/dataset.hpp"
#include "tablelab/model.hpp"
#include "tablelab/parallel.hpp"
#include "tablelab/patchkit.hpp"
#include "tablelab/rng.hpp"
#include "tablelab/train.hpp"

namespace tablelab {

// ---------------------------------------------------------------------------
// Ridge probes

enum class ProbeClass { cell, delimiter };
inline std::string_view to_string(ProbeClass c) { return c == ProbeClass::cell ? "cell" : "delimiter"; }

struct LinearProbe {
  Eigen::VectorXd w;
  double bias = 0.0;
  double lambda = 1.0;
  Axis target = Axis::column;
  ProbeClass token_class = ProbeClass::cell;
  int layer = 0;
  double r2_train = 0.0;
  double r2_eval = 0.0;

  double predict(const Eigen::RowVectorXd& x) const { return x.dot(w) + bias; }
  Eigen::VectorXd predict(const Eigen::MatrixXd& X) const {
    return (X * w).array() + bias;
  }
};

// 1 - SS_res / SS_tot; 0 when the target has no variance.
inline double r_squared(const Eigen::VectorXd& z, const Eigen::VectorXd& zhat) {
  if (z.size() == 0) return 0.0;
  const double mean = z.mean();
  const double ss_tot = (z.array() - mean).square().sum();
  if (ss_tot <= 0.0) return 0.0;
  return 1.0 - (z - zhat).squaredNorm() / ss_tot;
}

// Minimizes ||X w + b - z||^2 + lambda ||w||^2 with the bias left unpenalized
// (columns and targets are centered before solving).
inline LinearProbe fit_ridge(const Eigen::MatrixXd& X, const Eigen::VectorXd& z, double lambda) {
  if (X.rows() < 2) throw std::invalid_argument("fit_ridge: need at least two samples");
  if (X.rows() != z.size()) throw std::invalid_argument("fit_ridge: X and z disagree on sample count");
  if (lambda < 0) throw std::invalid_argument("fit_ridge: lambda must be non-negative");
  const Eigen::RowVectorXd mu = X.colwise().mean();
  const double zmu = z.mean();
  const Eigen::MatrixXd Xc = X.rowwise() - mu;
  const Eigen::VectorXd zc = z.array() - zmu;
  Eigen::MatrixXd A = Xc.transpose() * Xc;
  A.diagonal().array() += lambda;
  const Eigen::VectorXd rhs = Xc.transpose() * zc;
  LinearProbe p;
  p.lambda = lambda;
  if (lambda == 0.0) {
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(A);
    if (qr.rank() < A.cols())
      throw std::runtime_error("fit_ridge: singular system with lambda = 0; use lambda > 0");
    p.w = qr.solve(rhs);
  } else {
    Eigen::LLT<Eigen::MatrixXd> llt(A);
    if (llt.info() != Eigen::Success) throw std::runtime_error("fit_ridge: factorization failed");
    p.w = llt.solve(rhs);
  }
  p.bias = zmu - mu.dot(p.w);
  p.r2_train = r_squared(z, p.predict(X));
  return p;
}

// Probe features at table tokens of one class: value tokens (data cells and
// headers) or delimiters that close a cell.
inline bool probe_token(const TokenCoords& tc, int i, ProbeClass cls) {
  if (tc.r_idx[i] < 0 || tc.c_idx[i] < 0) return false;
  if (cls == ProbeClass::delimiter) return tc.cls[i] == TokenClass::delimiter;
  return tc.cls[i] == TokenClass::cell || tc.cls[i] == TokenClass::header;
}

// idx / (count - 1): 0 for the first row/column and 1 for the last.
inline double normalized_index(int idx, int count) {
  if (count < 2) throw std::invalid_argument("normalized_index: need at least two rows/columns");
  return static_cast<double>(idx) / static_cast<double>(count - 1);
}

inline double normalized_coord(const PromptInstance& p, const TokenCoords& tc, int i, Axis a) {
  return a == Axis::row ? normalized_index(tc.r_idx[i], p.grid_rows) : normalized_index(tc.c_idx[i], p.grid_cols);
}

struct ProbeData {
  // per sample: matrix of features (one row per selected token) and targets
  std::vector<Eigen::MatrixXd> X;
  std::vector<Eigen::VectorXd> z;
};

struct ProbeCurve {
  Axis target = Axis::column;
  ProbeClass token_class = ProbeClass::cell;
  std::vector<LinearProbe> probes;  // one per residual point 0..L

  std::vector<double> r2() const {
    std::vector<double> out;
    for (const auto& p : probes) out.push_back(p.r2_eval);
    return out;
  }
};

inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_80_20(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng = make_stream(seed, 0x5b1173);
  std::shuffle(idx.begin(), idx.end(), rng);
  const std::size_t n_train = std::max<std::size_t>(1, (n * 8) / 10);
  std::vector<std::size_t> tr(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(std::min(n_train, n)));
  std::vector<std::size_t> ev(idx.begin() + static_cast<std::ptrdiff_t>(std::min(n_train, n)), idx.end());
  return {tr, ev};
}

inline std::pair<Eigen::MatrixXd, Eigen::VectorXd> stack(const ProbeData& d, const std::vector<std::size_t>& which) {
  Eigen::Index rows = 0, cols = 0;
  for (auto i : which) {
    rows += d.X[i].rows();
    cols = d.X[i].cols();
  }
  Eigen::MatrixXd X(rows, cols);
  Eigen::VectorXd z(rows);
  Eigen::Index at = 0;
  for (auto i : which) {
    X.middleRows(at, d.X[i].rows()) = d.X[i];
    z.segment(at, d.z[i].size()) = d.z[i];
    at += d.X[i].rows();
  }
  return {X, z};
}

// Fits on 80% of the samples and scores on the held-out 20%.
inline LinearProbe fit_split_probe(const ProbeData& d, double lambda, std::uint64_t seed) {
  const auto [tr, ev] = split_80_20(d.X.size(), seed);
  const auto [Xtr, ztr] = stack(d, tr);
  LinearProbe p = fit_ridge(Xtr, ztr, lambda);
  if (!ev.empty()) {
    const auto [Xev, zev] = stack(d, ev);
    p.r2_eval = r_squared(zev, p.predict(Xev));
  }
  return p;
}

struct ProbeSweep {
  // [target][class] with target 0 = row, 1 = column; class 0 = cell, 1 = delimiter
  std::array<std::array<ProbeCurve, 2>, 2> curves;

  const ProbeCurve& get(Axis a, ProbeClass c) const {
    return curves[a == Axis::row ? 0 : 1][c == ProbeClass::cell ? 0 : 1];
  }

  std::string to_csv() const {
    std::ostringstream os;
    os.precision(8);
    os << "layer,row_cell,row_delimiter,column_cell,column_delimiter\n";
    const std::size_t n = curves[0][0].probes.size();
    for (std::size_t l = 0; l < n; ++l) {
      os << l;
      for (int a = 0; a < 2; ++a)
        for (int c = 0; c < 2; ++c) os << ',' << curves[a][c].probes[l].r2_eval;
      os << '\n';
    }
    return os.str();
  }
};

// Residual-stream probes at every residual point, for both targets and both
// token classes.
inline ProbeSweep probe_sweep(const Model<float>& model, std::span<const PromptInstance> prompts, double lambda = 1.0,
                              std::uint64_t seed = 1, int threads = 1) {
  const int L = model.config.n_layers;
  CapturePlan plan;
  for (int l = 0; l <= L; ++l) plan.add(HookPoint::resid(l));
  // data[l][target][class]
  std::vector<std::array<std::array<ProbeData, 2>, 2>> data(static_cast<std::size_t>(L + 1));
  for (auto& per_layer : data)
    for (auto& t : per_layer)
      for (auto& c : t) {
        c.X.resize(prompts.size());
        c.z.resize(prompts.size());
      }
  parallel_for(prompts.size(), threads, [&](std::size_t i) {
    const auto& p = prompts[i];
    ForwardOptions fo;
    fo.capture = &plan;
    const auto res = forward(model, p.token_ids, fo);
    const auto tc = token_coords(p);
    for (int c = 0; c < 2; ++c) {
      const ProbeClass cls = c == 0 ? ProbeClass::cell : ProbeClass::delimiter;
      std::vector<int> pos;
      for (int t = p.table.begin; t < p.table.end; ++t)
        if (probe_token(tc, t, cls)) pos.push_back(t);
      for (int l = 0; l <= L; ++l) {
        const MatF& r = res.trace.get(HookPoint::resid(l));
        Eigen::MatrixXd X(static_cast<Eigen::Index>(pos.size()), r.cols());
        for (std::size_t k = 0; k < pos.size(); ++k) X.row(static_cast<Eigen::Index>(k)) = r.row(pos[k]).cast<double>();
        for (int a = 0; a < 2; ++a) {
          const Axis ax = a == 0 ? Axis::row : Axis::column;
          Eigen::VectorXd z(static_cast<Eigen::Index>(pos.size()));
          for (std::size_t k = 0; k < pos.size(); ++k) z(static_cast<Eigen::Index>(k)) = normalized_coord(p, tc, pos[k], ax);
          auto& d = data[static_cast<std::size_t>(l)][static_cast<std::size_t>(a)][static_cast<std::size_t>(c)];
          d.X[i] = X;
          d.z[i] = std::move(z);
        }
      }
    }
  });
  ProbeSweep sw;
  for (int a = 0; a < 2; ++a)
    for (int c = 0; c < 2; ++c) {
      auto& curve = sw.curves[static_cast<std::size_t>(a)][static_cast<std::size_t>(c)];
      curve.target = a == 0 ? Axis::row : Axis::column;
      curve.token_class = c == 0 ? ProbeClass::cell : ProbeClass::delimiter;
      curve.probes.resize(static_cast<std::size_t>(L + 1));
    }
  parallel_for(static_cast<std::size_t>(L + 1) * 4, threads, [&](std::size_t job) {
    const int l = static_cast<int>(job / 4), a = static_cast<int>((job / 2) % 2), c = static_cast<int>(job % 2);
    auto& curve = sw.curves[static_cast<std::size_t>(a)][static_cast<std::size_t>(c)];
    LinearProbe p = fit_split_probe(data[static_cast<std::size_t>(l)][static_cast<std::size_t>(a)][static_cast<std::size_t>(c)],
                                    lambda, seed);
    p.layer = l;
    p.target = curve.target;
    p.token_class = curve.token_class;
    curve.probes[static_cast<std::size_t>(l)] = std::move(p);
  });
  return sw;
}

inline TensorFile probes_to_tensor_file(const ProbeSweep& sw) {
  TensorFile f;
  nlohmann::json meta = nlohmann::json::array();
  for (const auto& t : sw.curves)
    for (const auto& curve : t)
      for (const auto& p : curve.probes) {
        const std::string name = "probe." + std::string(to_string(p.target)) + "." +
                                 std::string(to_string(p.token_class)) + "." + std::to_string(p.layer);
        std::vector<float> w(static_cast<std::size_t>(p.w.size()));
        for (Eigen::Index i = 0; i < p.w.size(); ++i) w[static_cast<std::size_t>(i)] = static_cast<float>(p.w(i));
        const auto n = static_cast<std::uint64_t>(w.size());
        f.add(name, {n}, std::move(w));
        meta.push_back({{"name", name}, {"bias", p.bias}, {"lambda", p.lambda}, {"r2_train", p.r2_train}, {"r2_eval", p.r2_eval}});
      }
  f.meta = {{"kind", "probes"}, {"probes", meta}};
  return f;
}

// ---------------------------------------------------------------------------
// Prediction traces

struct PredictionTrace {
  std::vector<int> position, r_idx, c_idx;
  std::vector<double> predicted;  // in index units
};

// Applies a probe to every table token of its class in one prompt; `resid`
// is the residual matrix at the probe's layer.
inline PredictionTrace predict_trace(const LinearProbe& probe, const PromptInstance& p, const MatF& resid) {
  const auto tc = token_coords(p);
  PredictionTrace tr;
  const int count = probe.target == Axis::row ? p.grid_rows : p.grid_cols;
  for (int t = p.table.begin; t < p.table.end; ++t) {
    if (!probe_token(tc, t, probe.token_class)) continue;
    tr.position.push_back(t);
    tr.r_idx.push_back(tc.r_idx[t]);
    tr.c_idx.push_back(tc.c_idx[t]);
    tr.predicted.push_back(probe.predict(Eigen::RowVectorXd(resid.row(t).cast<double>())) * (count - 1));
  }
  return tr;
}

inline std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

inline double pearson(std::span<const double> a, std::span<const double> b) {
  const std::size_t n = a.size();
  if (n < 2 || b.size() != n) return 0.0;
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n, mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa <= 0 || sbb <= 0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

inline double spearman(std::span<const double> a, std::span<const double> b) {
  const auto ra = average_ranks(a), rb = average_ranks(b);
  return pearson(ra, rb);
}

// Mean within-row Spearman correlation between predictions and the given
// column indices (rows with fewer than two tokens are skipped).
inline std::optional<double> sawtooth_score(const PredictionTrace& tr, std::span<const int> c_idx) {
  std::map<int, std::pair<std::vector<double>, std::vector<double>>> rows;
  for (std::size_t i = 0; i < tr.predicted.size(); ++i) {
    rows[tr.r_idx[i]].first.push_back(tr.predicted[i]);
    rows[tr.r_idx[i]].second.push_back(static_cast<double>(c_idx[i]));
  }
  double sum = 0.0;
  int n = 0;
  for (const auto& [r, v] : rows) {
    if (v.first.size() < 2) continue;
    sum += spearman(v.first, v.second);
    ++n;
  }
  if (n == 0) return std::nullopt;
  return sum / n;
}

inline std::optional<double> sawtooth_score(const PredictionTrace& tr) { return sawtooth_score(tr, tr.c_idx); }

// Fraction of consecutive row transitions where the mean predicted row index
// increases.
inline std::optional<double> step_score(const PredictionTrace& tr) {
  std::map<int, std::pair<double, int>> rows;
  for (std::size_t i = 0; i < tr.predicted.size(); ++i) {
    rows[tr.r_idx[i]].first += tr.predicted[i];
    rows[tr.r_idx[i]].second += 1;
  }
  if (rows.size() < 2) return std::nullopt;
  int up = 0, n = 0;
  double prev = 0.0;
  bool first = true;
  for (const auto& [r, v] : rows) {
    const double m = v.first / v.second;
    if (!first) {
      up += m > prev ? 1 : 0;
      ++n;
    }
    prev = m;
    first = false;
  }
  return static_cast<double>(up) / n;
}

struct PermutationTest {
  double observed = 0.0;
  double null_mean = 0.0;
  double p_value = 1.0;
  int n_permutations = 0;
};

// Mean sawtooth score over traces against a null where column indices are
// shuffled within each row.
inline PermutationTest sawtooth_permutation_test(std::span<const PredictionTrace> traces, int n_perm, std::uint64_t seed) {
  auto mean_score = [&](const std::vector<std::vector<int>>& cols) {
    double s = 0.0;
    int n = 0;
    for (std::size_t i = 0; i < traces.size(); ++i)
      if (auto v = sawtooth_score(traces[i], cols[i])) {
        s += *v;
        ++n;
      }
    return n ? s / n : 0.0;
  };
  std::vector<std::vector<int>> cols;
  for (const auto& t : traces) cols.push_back(t.c_idx);
  PermutationTest pt;
  pt.observed = mean_score(cols);
  pt.n_permutations = n_perm;
  Rng rng = make_stream(seed, 0x9e77);
  int at_least = 0;
  double null_sum = 0.0;
  for (int k = 0; k < n_perm; ++k) {
    auto perm = cols;
    for (std::size_t i = 0; i < traces.size(); ++i) {
      std::map<int, std::vector<std::size_t>> by_row;
      for (std::size_t j = 0; j < traces[i].r_idx.size(); ++j) by_row[traces[i].r_idx[j]].push_back(j);
      for (auto& [r, js] : by_row) {
        std::vector<int> vals;
        for (auto j : js) vals.push_back(perm[i][j]);
        std::shuffle(vals.begin(), vals.end(), rng);
        for (std::size_t q = 0; q < js.size(); ++q) perm[i][js[q]] = vals[q];
      }
    }
    const double s = mean_score(perm);
    null_sum += s;
    if (s >= pt.observed) ++at_least;
  }
  pt.null_mean = n_perm ? null_sum / n_perm : 0.0;
  pt.p_value = static_cast<double>(1 + at_least) / static_cast<double>(1 + n_perm);
  return pt;
}

// ---------------------------------------------------------------------------
// RoPE interaction scores

struct InteractionMatrix {
  int layer = 0;
  int head = 0;
  int first_index = 1;   // column index of S row/col 0
  Eigen::MatrixXd S;     // S(j, l) over query target j and table column l
  double contrast = 0.0; // mean diagonal - mean off-diagonal

  std::string to_csv() const {
    std::ostringstream os;
    os.precision(8);
    os << "j\\l";
    for (Eigen::Index c = 0; c < S.cols(); ++c) os << ',' << first_index + c;
    os << '\n';
    for (Eigen::Index r = 0; r < S.rows(); ++r) {
      os << first_index + r;
      for (Eigen::Index c = 0; c < S.cols(); ++c) os << ',' << S(r, c);
      os << '\n';
    }
    return os.str();
  }
};

// S(j, l) = rope(q_j, j) . rope(k_l, l) with positions given by the column
// indices themselves.
inline Eigen::MatrixXd interaction_scores(const std::vector<Eigen::VectorXd>& qbar, const std::vector<Eigen::VectorXd>& kbar,
                                          int first_index, double theta) {
  const auto n = static_cast<Eigen::Index>(qbar.size());
  Eigen::MatrixXd S(n, static_cast<Eigen::Index>(kbar.size()));
  for (Eigen::Index j = 0; j < n; ++j) {
    const auto& q = qbar[static_cast<std::size_t>(j)];
    const auto qr = rope_apply<double>(std::span<const double>(q.data(), static_cast<std::size_t>(q.size())),
                                       static_cast<double>(first_index + j), theta);
    for (Eigen::Index l = 0; l < S.cols(); ++l) {
      const auto& k = kbar[static_cast<std::size_t>(l)];
      const auto kr = rope_apply<double>(std::span<const double>(k.data(), static_cast<std::size_t>(k.size())),
                                         static_cast<double>(first_index + l), theta);
      S(j, l) = std::inner_product(qr.begin(), qr.end(), kr.begin(), 0.0);
    }
  }
  return S;
}

inline double diagonal_contrast(const Eigen::MatrixXd& S) {
  const Eigen::Index n = std::min(S.rows(), S.cols());
  double diag = 0.0, off = 0.0;
  int nd = 0, no = 0;
  for (Eigen::Index j = 0; j < S.rows(); ++j)
    for (Eigen::Index l = 0; l < S.cols(); ++l) {
      if (j == l && j < n) {
        diag += S(j, l);
        ++nd;
      } else {
        off += S(j, l);
        ++no;
      }
    }
  return (nd ? diag / nd : 0.0) - (no ? off / no : 0.0);
}

struct InteractionReport {
  std::vector<InteractionMatrix> heads;  // every head, layer-major
  std::vector<HeadId> selected;          // ranked by |contrast|
  int first_index = 1;
  int last_index = 0;
};

// Column indices 1 .. min_cols-1 (the key column is never a query target).
inline InteractionReport rope_interaction(const Model<float>& model, std::span<const PromptInstance> prompts, int top_k = 20,
                                          int threads = 1) {
  const int L = model.config.n_layers, H = model.config.n_heads, dh = model.config.d_head;
  int min_cols = std::numeric_limits<int>::max();
  for (const auto& p : prompts) min_cols = std::min(min_cols, p.grid_cols);
  if (prompts.empty() || min_cols - 1 < 3)
    throw std::invalid_argument("rope_interaction: fewer than three query-able column indices");
  const int first = 1, n_idx = min_cols - 1;
  CapturePlan plan;
  for (int l = 0; l < L; ++l)
    for (int h = 0; h < H; ++h) {
      plan.add(HookPoint::q_pre(l, h));
      plan.add(HookPoint::k_pre(l, h));
    }
  struct Acc {
    std::vector<Eigen::VectorXd> q, k;  // per head x index
    std::vector<int> nq, nk;
  };
  auto make_acc = [&] {
    Acc a;
    a.q.assign(static_cast<std::size_t>(L * H * n_idx), Eigen::VectorXd::Zero(dh));
    a.k = a.q;
    a.nq.assign(a.q.size(), 0);
    a.nk.assign(a.q.size(), 0);
    return a;
  };
  std::vector<Acc> per(prompts.size());
  parallel_for(prompts.size(), threads, [&](std::size_t i) {
    const auto& p = prompts[i];
    Acc a = make_acc();
    ForwardOptions fo;
    fo.capture = &plan;
    const auto res = forward(model, p.token_ids, fo);
    const auto tc = token_coords(p);
    const Span qc = p.span("q_col");
    const int qcol = tc.c_idx[p.span("t_col").begin];
    for (int l = 0; l < L; ++l)
      for (int h = 0; h < H; ++h) {
        const std::size_t base = static_cast<std::size_t>((l * H + h) * n_idx);
        const MatF& q = res.trace.get(HookPoint::q_pre(l, h));
        const MatF& k = res.trace.get(HookPoint::k_pre(l, h));
        if (qcol >= first && qcol < first + n_idx) {
          for (int t = qc.begin; t < qc.end; ++t) {
            a.q[base + static_cast<std::size_t>(qcol - first)] += q.row(t).cast<double>().transpose();
            ++a.nq[base + static_cast<std::size_t>(qcol - first)];
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
  Acc tot = make_acc();
  for (const auto& a : per)
    for (std::size_t j = 0; j < tot.q.size(); ++j) {
      tot.q[j] += a.q[j];
      tot.k[j] += a.k[j];
      tot.nq[j] += a.nq[j];
      tot.nk[j] += a.nk[j];
    }
  InteractionReport rep;
  rep.first_index = first;
  rep.last_index = first + n_idx - 1;
  Eigen::MatrixXd absc(L, H);
  for (int l = 0; l < L; ++l)
    for (int h = 0; h < H; ++h) {
      const std::size_t base = static_cast<std::size_t>((l * H + h) * n_idx);
      std::vector<Eigen::VectorXd> qbar, kbar;
      for (int j = 0; j < n_idx; ++j) {
        const auto s = base + static_cast<std::size_t>(j);
        qbar.push_back(tot.nq[s] ? Eigen::VectorXd(tot.q[s] / tot.nq[s]) : Eigen::VectorXd::Zero(dh));
        kbar.push_back(tot.nk[s] ? Eigen::VectorXd(tot.k[s] / tot.nk[s]) : Eigen::VectorXd::Zero(dh));
      }
      InteractionMatrix m;
      m.layer = l;
      m.head = h;
      m.first_index = first;
      m.S = interaction_scores(qbar, kbar, first, model.config.rope_theta);
      m.contrast = diagonal_contrast(m.S);
      absc(l, h) = std::abs(m.contrast);
      rep.heads.push_back(std::move(m));
    }
  rep.selected = top_heads(absc, top_k);
  return rep;
}

// ---------------------------------------------------------------------------
// Head-output probes

struct HeadProbeRanking {
  // [target][class] as in ProbeSweep
  std::array<std::array<Eigen::MatrixXd, 2>, 2> r2;  // L x A eval R^2
  std::array<std::array<std::vector<HeadId>, 2>, 2> top;

  const std::vector<HeadId>& selected(Axis a, ProbeClass c) const {
    return top[a == Axis::row ? 0 : 1][c == ProbeClass::cell ? 0 : 1];
  }
  const Eigen::MatrixXd& scores(Axis a, ProbeClass c) const { return r2[a == Axis::row ? 0 : 1][c == ProbeClass::cell ? 0 : 1]; }
};

// Ridge probes on each head's output contribution at cell and delimiter
// tokens; heads ranked by held-out R^2.
inline HeadProbeRanking head_probe_rank(const Model<float>& model, std::span<const PromptInstance> prompts, int top_k = 20,
                                        double lambda = 1.0, std::uint64_t seed = 1, int threads = 1) {
  const int L = model.config.n_layers, H = model.config.n_heads;
  CapturePlan plan;
  for (int l = 0; l < L; ++l)
    for (int h = 0; h < H; ++h) plan.add(HookPoint::head_out(l, h));
  // data[head][target][class]
  std::vector<std::array<std::array<ProbeData, 2>, 2>> data(static_cast<std::size_t>(L * H));
  for (auto& hd : data)
    for (auto& t : hd)
      for (auto& c : t) {
        c.X.resize(prompts.size());
        c.z.resize(prompts.size());
      }
  parallel_for(prompts.size(), threads, [&](std::size_t i) {
    const auto& p = prompts[i];
    ForwardOptions fo;
    fo.capture = &plan;
    const auto res = forward(model, p.token_ids, fo);
    const auto tc = token_coords(p);
    for (int c = 0; c < 2; ++c) {
      const ProbeClass cls = c == 0 ? ProbeClass::cell : ProbeClass::delimiter;
      std::vector<int> pos;
      for (int t = p.table.begin; t < p.table.end; ++t)
        if (probe_token(tc, t, cls)) pos.push_back(t);
      for (int l = 0; l < L; ++l)
        for (int h = 0; h < H; ++h) {
          const MatF& o = res.trace.get(HookPoint::head_out(l, h));
          Eigen::MatrixXd X(static_cast<Eigen::Index>(pos.size()), o.cols());
          for (std::size_t k = 0; k < pos.size(); ++k) X.row(static_cast<Eigen::Index>(k)) = o.row(pos[k]).cast<double>();
          for (int a = 0; a < 2; ++a) {
            const Axis ax = a == 0 ? Axis::row : Axis::column;
            Eigen::VectorXd z(static_cast<Eigen::Index>(pos.size()));
            for (std::size_t k = 0; k < pos.size(); ++k) z(static_cast<Eigen::Index>(k)) = normalized_coord(p, tc, pos[k], ax);
            auto& d = data[static_cast<std::size_t>(l * H + h)][static_cast<std::size_t>(a)][static_cast<std::size_t>(c)];
            d.X[i] = X;
            d.z[i] = std::move(z);
          }
        }
    }
  });
  HeadProbeRanking rk;
  for (auto& t : rk.r2)
    for (auto& m : t) m = Eigen::MatrixXd::Zero(L, H);
  parallel_for(static_cast<std::size_t>(L * H) * 4, threads, [&](std::size_t job) {
    const int hd = static_cast<int>(job / 4), a = static_cast<int>((job / 2) % 2), c = static_cast<int>(job % 2);
    const auto p = fit_split_probe(data[static_cast<std::size_t>(hd)][static_cast<std::size_t>(a)][static_cast<std::size_t>(c)],
                                   lambda, seed);
    rk.r2[static_cast<std::size_t>(a)][static_cast<std::size_t>(c)](hd / H, hd % H) = p.r2_eval;
  });
  for (int a = 0; a < 2; ++a)
    for (int c = 0; c < 2; ++c)
      rk.top[static_cast<std::size_t>(a)][static_cast<std::size_t>(c)] =
          top_heads(rk.r2[static_cast<std::size_t>(a)][static_cast<std::size_t>(c)], top_k);
  return rk;
}

// ---------------------------------------------------------------------------
// Swap counterfactuals and delimiter-head patching

// The table with the values of two data columns (or two data rows) swapped;
// headers stay in place, so the unchanged query now resolves to the value
// that used to sit in the partner column (row).
struct SwapPair {
  Sample original;
  Sample swapped;
  Axis axis = Axis::column;
  int partner = 0;
};

inline SwapPair make_swap(const Sample& s, Axis axis, Rng& rng) {
  if (s.query.kind != QueryKind::atomic) throw std::invalid_argument("make_swap: atomic queries only");
  const Table& t = s.table;
  const int r = s.query.row_targets[0], c = s.query.col_targets[0];
  SwapPair sp;
  sp.original = s;
  sp.original.corruption.reset();
  sp.original.noise.reset();
  sp.original.layout.reset();
  sp.axis = axis;
  sp.swapped = sp.original;
  Table& u = sp.swapped.table;
  if (axis == Axis::column) {
    if (t.cols() < 3) throw std::invalid_argument("make_swap: need two data columns");
    int other = 1 + static_cast<int>(uniform_index(rng, static_cast<std::size_t>(t.cols() - 2)));
    if (other >= c) ++other;
    sp.partner = other;
    for (int rr = 0; rr < t.rows(); ++rr) std::swap(u.cells[rr][c], u.cells[rr][other]);
  } else {
    if (t.rows() < 2) throw std::invalid_argument("make_swap: need two rows");
    int other = static_cast<int>(uniform_index(rng, static_cast<std::size_t>(t.rows() - 1)));
    if (other >= r) ++other;
    sp.partner = other;
    for (int cc = 1; cc < t.cols(); ++cc) std::swap(u.cells[r][cc], u.cells[other][cc]);
  }
  return sp;
}

struct SwapPrompts {
  PromptInstance original, swapped;
  int gold = 0;         // value answered on the original table
  int foil = 0;         // value answered on the swapped table
  int original_pos = 0; // position of the gold value in the original
  int moved_pos = 0;    // position of the gold value in the swapped table
};

inline SwapPrompts swap_prompts(const Workspace& ws, const SwapPair& sp) {
  SwapPrompts out;
  out.original = ws.prompt(sp.original);
  out.swapped = ws.prompt(sp.swapped);
  if (out.original.length() != out.swapped.length()) throw std::logic_error("swap_prompts: length changed");
  const int r = sp.original.query.row_targets[0], c = sp.original.query.col_targets[0];
  out.gold = out.original.answer_ids.at(0);
  out.foil = out.swapped.answer_ids.at(0);
  out.original_pos = out.original.span("t_cell").begin;
  // where the gold value went
  const Sample& o = sp.original;
  const int mr = sp.axis == Axis::row ? sp.partner : r;
  const int mc = sp.axis == Axis::column ? sp.partner : c;
  if (sp.swapped.table.at(mr, mc) != o.table.at(r, c)) throw std::logic_error("swap_prompts: value did not move");
  Sample probe = sp.swapped;
  probe.query.row_targets = {mr};
  probe.query.col_targets = {mc};
  out.moved_pos = ws.prompt(probe).span("t_cell").begin;
  return out;
}

// Patches the selected heads' outputs from the original run (at the gold
// value's position) into the swapped run (at the value's new position).
inline EffectMatrix delimiter_head_patch(const Model<float>& model, std::span<const SwapPrompts> pairs,
                                         const std::vector<HeadId>& heads, const PatchOptions& opts = {}) {
  CapturePlan plan;
  for (const auto& h : heads) plan.add(HookPoint::head_out(h.layer, h.head));
  std::vector<std::optional<Eigen::MatrixXd>> per(pairs.size());
  parallel_for(pairs.size(), opts.threads, [&](std::size_t i) {
    const auto& sp = pairs[i];
    ForwardOptions fo;
    fo.capture = &plan;
    const auto orig = forward(model, sp.original.token_ids, fo);
    const auto swp = forward(model, sp.swapped.token_ids);
    const double ld_clean = logit_diff(orig.logits.row(0), sp.gold, sp.foil);
    const double ld_corrupt = logit_diff(swp.logits.row(0), sp.gold, sp.foil);
    if (!effect_score(0.0, ld_clean, ld_corrupt, opts.denom_eps)) return;
    double ld = ld_corrupt;
    if (!heads.empty()) {
      InterventionPlan ip;
      for (const auto& h : heads)
        ip.add(HeadOutputReplace{h.layer, h.head, {sp.moved_pos},
                                 orig.trace.get(HookPoint::head_out(h.layer, h.head)).row(sp.original_pos)});
      ForwardOptions po;
      po.plan = &ip;
      ld = logit_diff(forward(model, sp.swapped.token_ids, po).logits.row(0), sp.gold, sp.foil);
    }
    Eigen::MatrixXd one(1, 1);
    one(0, 0) = *effect_score(ld, ld_clean, ld_corrupt, opts.denom_eps);
    per[i] = one;
  });
  auto m = reduce_effects(per, 1, 1);
  m.title = "delimiter head patch";
  m.row_labels = {"all"};
  m.col_labels = {"effect"};
  return m;
}

// ---------------------------------------------------------------------------
// Noise evaluation

struct NoiseCondition {
  std::string name;
  std::optional<NoiseSpec> spec;
};

inline std::vector<NoiseCondition> default_noise_conditions(int amount = 2) {
  return {{"baseline", std::nullopt},
          {"structural_before", NoiseSpec{NoiseKind::structural_pipes, NoisePlacement::before_target, amount}},
          {"structural_after", NoiseSpec{NoiseKind::structural_pipes, NoisePlacement::after_target, amount}},
          {"filler_before", NoiseSpec{NoiseKind::length_filler, NoisePlacement::before_target, amount}},
          {"filler_after", NoiseSpec{NoiseKind::length_filler, NoisePlacement::after_target, amount}}};
}

struct NoiseResult {
  std::vector<std::string> names;
  std::vector<double> em;
  int n = 0;

  double at(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return em[i];
    throw std::out_of_range("noise result: no condition " + name);
  }
  std::string to_csv() const {
    std::ostringstream os;
    os << "condition,em,n\n";
    for (std::size_t i = 0; i < names.size(); ++i) os << names[i] << ',' << em[i] << ',' << n << '\n';
    return os.str();
  }
};

// EM under each condition; samples whose target sits in the key column are
// skipped (nothing precedes the row start).
inline NoiseResult noise_eval(const Model<float>& model, const Workspace& ws, std::span<const Sample> samples,
                              const std::vector<NoiseCondition>& conditions, int threads = 1) {
  std::vector<const Sample*> usable;
  for (const auto& s : samples)
    if (s.query.kind == QueryKind::atomic && s.query.col_targets[0] != 0) usable.push_back(&s);
  NoiseResult res;
  res.n = static_cast<int>(usable.size());
  for (const auto& cond : conditions) {
    std::vector<PromptInstance> prompts;
    for (const auto* s : usable) {
      Sample clean = *s;
      clean.noise.reset();
      prompts.push_back(ws.prompt(clean, false, cond.spec));
    }
    res.names.push_back(cond.name);
    res.em.push_back(em_eval(model, prompts, nullptr, threads));
  }
  return res;
}

}  // namespace tablelab
