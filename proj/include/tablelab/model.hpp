#pragma once

// Decoder-only transformer with rotary position embeddings: pre-norm RMS
// blocks, SiLU-gated MLP, untied unembedding. Forward passes accept named
// capture points and activation edits; a cached variant feeds the manual
// backward pass used for training and gradient checks.

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "tablelab/rng.hpp"
#include "tablelab/tensor_file.hpp"

namespace tablelab {

struct ModelConfig {
  int n_layers = 6;
  int n_heads = 4;
  int d_model = 128;
  int d_head = 32;
  int d_mlp = 256;
  int vocab_size = 0;
  int max_seq_len = 512;
  double rope_theta = 10000.0;
  double norm_eps = 1e-5;
  std::string precision = "f32";

  void validate() const {
    if (n_layers < 0 || n_heads < 1 || d_model < 1 || d_head < 1 || d_mlp < 1 || vocab_size < 1 || max_seq_len < 1)
      throw std::invalid_argument("model config: dimensions must be positive");
    if (d_model != n_heads * d_head) throw std::invalid_argument("model config: d_model must equal n_heads * d_head");
    if (d_head % 2 != 0) throw std::invalid_argument("model config: d_head must be even for rotary pairs");
    if (precision != "f32" && precision != "f64") throw std::invalid_argument("model config: precision must be f32 or f64");
  }

  // Closed form of the parameter count.
  std::int64_t parameter_count() const {
    const std::int64_t d = d_model, v = vocab_size, f = d_mlp;
    return v * d + n_layers * (2 * d + 4 * d * d + 3 * d * f) + d + d * v;
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ModelConfig, n_layers, n_heads, d_model, d_head, d_mlp, vocab_size,
                                                max_seq_len, rope_theta, norm_eps, precision)

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatF = Mat<float>;

template <class S>
struct LayerParams {
  Mat<S> attn_norm, wq, wk, wv, wo, mlp_norm, w_gate, w_up, w_down;
};

template <class S>
struct Params {
  Mat<S> embed;    // vocab x d
  std::vector<LayerParams<S>> layers;
  Mat<S> final_norm;
  Mat<S> unembed;  // d x vocab

  // f(name, family, matrix) for every tensor in a fixed order.
  template <class F>
  void visit(F&& f) {
    f(std::string("embed"), std::string_view("embed"), embed);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const std::string p = "layers." + std::to_string(l) + ".";
      auto& L = layers[l];
      f(p + "attn_norm", std::string_view("attn_norm"), L.attn_norm);
      f(p + "wq", std::string_view("wq"), L.wq);
      f(p + "wk", std::string_view("wk"), L.wk);
      f(p + "wv", std::string_view("wv"), L.wv);
      f(p + "wo", std::string_view("wo"), L.wo);
      f(p + "mlp_norm", std::string_view("mlp_norm"), L.mlp_norm);
      f(p + "w_gate", std::string_view("w_gate"), L.w_gate);
      f(p + "w_up", std::string_view("w_up"), L.w_up);
      f(p + "w_down", std::string_view("w_down"), L.w_down);
    }
    f(std::string("final_norm"), std::string_view("final_norm"), final_norm);
    f(std::string("unembed"), std::string_view("unembed"), unembed);
  }
  template <class F>
  void visit(F&& f) const {
    const_cast<Params*>(this)->visit([&](const std::string& n, std::string_view fam, Mat<S>& m) {
      f(n, fam, static_cast<const Mat<S>&>(m));
    });
  }

  static Params zeros(const ModelConfig& c) {
    Params p;
    const int d = c.d_model;
    p.embed = Mat<S>::Zero(c.vocab_size, d);
    p.layers.resize(static_cast<std::size_t>(c.n_layers));
    for (auto& L : p.layers) {
      L.attn_norm = Mat<S>::Zero(1, d);
      L.wq = L.wk = L.wv = L.wo = Mat<S>::Zero(d, d);
      L.mlp_norm = Mat<S>::Zero(1, d);
      L.w_gate = L.w_up = Mat<S>::Zero(d, c.d_mlp);
      L.w_down = Mat<S>::Zero(c.d_mlp, d);
    }
    p.final_norm = Mat<S>::Zero(1, d);
    p.unembed = Mat<S>::Zero(d, c.vocab_size);
    return p;
  }

  void set_zero() {
    visit([](const std::string&, std::string_view, Mat<S>& m) { m.setZero(); });
  }

  std::int64_t count() const {
    std::int64_t n = 0;
    visit([&](const std::string&, std::string_view, const Mat<S>& m) { n += m.size(); });
    return n;
  }
};

inline bool is_norm_family(std::string_view fam) {
  return fam == "attn_norm" || fam == "mlp_norm" || fam == "final_norm";
}

// cos/sin of p * theta^(-2i/d_head) for every position p and pair i.
struct RopeTable {
  int half = 0;
  std::vector<double> cos, sin;

  RopeTable() = default;
  RopeTable(int max_len, int d_head, double theta) : half(d_head / 2) {
    cos.resize(static_cast<std::size_t>(max_len) * half);
    sin.resize(cos.size());
    for (int p = 0; p < max_len; ++p)
      for (int i = 0; i < half; ++i) {
        const double angle = p * std::pow(theta, -2.0 * i / d_head);
        cos[static_cast<std::size_t>(p) * half + i] = std::cos(angle);
        sin[static_cast<std::size_t>(p) * half + i] = std::sin(angle);
      }
  }
};

// Rotates coordinate pairs (2i, 2i+1) of a d_head vector by p * theta^(-2i/d_head).
template <class S>
std::vector<S> rope_apply(std::span<const S> v, double position, double theta) {
  if (v.size() % 2 != 0) throw std::invalid_argument("rope_apply: dimension must be even");
  std::vector<S> out(v.size());
  const double d = static_cast<double>(v.size());
  for (std::size_t i = 0; i < v.size() / 2; ++i) {
    const double angle = position * std::pow(theta, -2.0 * static_cast<double>(i) / d);
    const S c = static_cast<S>(std::cos(angle)), s = static_cast<S>(std::sin(angle));
    const S a = v[2 * i], b = v[2 * i + 1];
    out[2 * i] = a * c - b * s;
    out[2 * i + 1] = a * s + b * c;
  }
  return out;
}

template <class S>
struct Model {
  ModelConfig config;
  Params<S> w;
  RopeTable rope;

  void build_rope() { rope = RopeTable(config.max_seq_len, config.d_head, config.rope_theta); }
};

// Scaled-normal initialization: N(0, 0.02) everywhere, residual output
// projections (wo, w_down) scaled by 1/sqrt(2 L), norm gains 1.
template <class S>
Model<S> init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Model<S> m;
  m.config = config;
  m.w = Params<S>::zeros(config);
  Rng rng = make_stream(seed, 0x1417);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double base = 0.02;
  const double resid_scale = config.n_layers > 0 ? 1.0 / std::sqrt(2.0 * config.n_layers) : 1.0;
  m.w.visit([&](const std::string&, std::string_view fam, Mat<S>& t) {
    if (is_norm_family(fam)) {
      t.setOnes();
      return;
    }
    const double stdv = (fam == "wo" || fam == "w_down") ? base * resid_scale : base;
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = static_cast<S>(stdv * normal(rng));
  });
  m.build_rope();
  return m;
}

// ---------------------------------------------------------------------------
// Hook points

enum class HookKind { resid, head_out, attn, q_pre, k_pre, logits };

// Stable names: "resid.L" (L = 0 embeddings, l = output of block l-1),
// "head_out.l.h" (head contribution after the output projection),
// "attn.l.h" (T x T pattern), "q_pre.l.h" / "k_pre.l.h" (pre-rotary
// query / key), "logits".
struct HookPoint {
  HookKind kind = HookKind::resid;
  int layer = 0;
  int head = 0;

  auto operator<=>(const HookPoint&) const = default;

  std::string name() const {
    switch (kind) {
      case HookKind::resid: return "resid." + std::to_string(layer);
      case HookKind::head_out: return "head_out." + std::to_string(layer) + "." + std::to_string(head);
      case HookKind::attn: return "attn." + std::to_string(layer) + "." + std::to_string(head);
      case HookKind::q_pre: return "q_pre." + std::to_string(layer) + "." + std::to_string(head);
      case HookKind::k_pre: return "k_pre." + std::to_string(layer) + "." + std::to_string(head);
      case HookKind::logits: return "logits";
    }
    return "?";
  }

  static HookPoint parse(std::string_view s) {
    auto dot = s.find('.');
    const std::string_view kind = s.substr(0, dot);
    HookPoint h;
    if (kind == "logits") {
      if (dot != std::string_view::npos) throw std::invalid_argument("hook: logits takes no indices");
      h.kind = HookKind::logits;
      return h;
    }
    if (dot == std::string_view::npos) throw std::invalid_argument("hook: missing layer in " + std::string(s));
    std::string_view rest = s.substr(dot + 1);
    auto num = [&](std::string_view t) {
      if (t.empty()) throw std::invalid_argument("hook: empty index in " + std::string(s));
      int v = 0;
      for (char c : t) {
        if (c < '0' || c > '9') throw std::invalid_argument("hook: bad index in " + std::string(s));
        v = v * 10 + (c - '0');
      }
      return v;
    };
    if (kind == "resid") {
      h.kind = HookKind::resid;
      h.layer = num(rest);
      return h;
    }
    if (kind == "head_out") h.kind = HookKind::head_out;
    else if (kind == "attn") h.kind = HookKind::attn;
    else if (kind == "q_pre") h.kind = HookKind::q_pre;
    else if (kind == "k_pre") h.kind = HookKind::k_pre;
    else throw std::invalid_argument("hook: unknown kind " + std::string(kind));
    auto d2 = rest.find('.');
    if (d2 == std::string_view::npos) throw std::invalid_argument("hook: missing head in " + std::string(s));
    h.layer = num(rest.substr(0, d2));
    h.head = num(rest.substr(d2 + 1));
    return h;
  }

  static HookPoint resid(int l) { return {HookKind::resid, l, 0}; }
  static HookPoint head_out(int l, int h) { return {HookKind::head_out, l, h}; }
  static HookPoint attn(int l, int h) { return {HookKind::attn, l, h}; }
  static HookPoint q_pre(int l, int h) { return {HookKind::q_pre, l, h}; }
  static HookPoint k_pre(int l, int h) { return {HookKind::k_pre, l, h}; }
  static HookPoint logits() { return {HookKind::logits, 0, 0}; }
};

struct CapturePlan {
  std::set<HookPoint> points;

  CapturePlan& add(HookPoint p) {
    points.insert(p);
    return *this;
  }
  CapturePlan& add(std::string_view name) { return add(HookPoint::parse(name)); }
  bool wants(const HookPoint& p) const { return points.count(p) > 0; }
  bool wants_head_level(int layer, int n_heads) const {
    for (int h = 0; h < n_heads; ++h)
      if (wants(HookPoint::head_out(layer, h))) return true;
    return false;
  }
};

// Dense f32 tensors keyed by hook name. resid / head_out: T x d, attn: T x T,
// q_pre / k_pre: T x d_head, logits: T x vocab.
struct ActivationTrace {
  std::map<std::string, MatF> tensors;

  const MatF& get(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw std::out_of_range("trace: point not captured: " + name);
    return it->second;
  }
  const MatF& get(const HookPoint& p) const { return get(p.name()); }
  bool has(const HookPoint& p) const { return tensors.count(p.name()) > 0; }

  TensorFile to_tensor_file() const {
    TensorFile f;
    for (const auto& [name, m] : tensors)
      f.add(name, {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())},
            std::vector<float>(m.data(), m.data() + m.size()));
    return f;
  }
};

// ---------------------------------------------------------------------------
// Interventions

struct ResidualReplace {
  int layer = 0;
  std::vector<int> positions;
  MatF source;  // one row per position
};
struct ResidualAdd {
  int layer = 0;
  std::vector<int> positions;
  MatF vector;  // 1 x d, added at every position
};
struct HeadOutputReplace {
  int layer = 0;
  int head = 0;
  std::vector<int> positions;
  MatF source;  // one row per position
};
struct HeadZero {
  int layer = 0;
  int head = 0;
};

using Edit = std::variant<ResidualReplace, ResidualAdd, HeadOutputReplace, HeadZero>;

// Edits run in layer order as the stream is produced. At a given point every
// Replace is applied before any Add.
struct InterventionPlan {
  std::vector<Edit> edits;

  bool empty() const { return edits.empty(); }
  InterventionPlan& add(Edit e) {
    edits.push_back(std::move(e));
    return *this;
  }

  void validate(const ModelConfig& c, int seq_len) const {
    std::set<std::tuple<int, int, int, int>> replaced;  // (kind, layer, head, position)
    auto check_positions = [&](const std::vector<int>& pos, const char* what) {
      for (int p : pos)
        if (p < 0 || p >= seq_len) throw std::out_of_range(std::string(what) + ": position out of bounds");
    };
    auto check_layer = [&](int l, int hi, const char* what) {
      if (l < 0 || l > hi) throw std::out_of_range(std::string(what) + ": invalid layer " + std::to_string(l));
    };
    auto check_head = [&](int h, const char* what) {
      if (h < 0 || h >= c.n_heads) throw std::out_of_range(std::string(what) + ": invalid head " + std::to_string(h));
    };
    for (const auto& e : edits) {
      std::visit(
          [&](const auto& x) {
            using T = std::decay_t<decltype(x)>;
            if constexpr (std::is_same_v<T, ResidualReplace>) {
              check_layer(x.layer, c.n_layers, "ResidualReplace");
              check_positions(x.positions, "ResidualReplace");
              if (x.source.rows() != static_cast<Eigen::Index>(x.positions.size()) || x.source.cols() != c.d_model)
                throw std::invalid_argument("ResidualReplace: source shape mismatch");
              for (int p : x.positions)
                if (!replaced.insert({0, x.layer, 0, p}).second)
                  throw std::invalid_argument("ResidualReplace: position replaced twice");
            } else if constexpr (std::is_same_v<T, ResidualAdd>) {
              check_layer(x.layer, c.n_layers, "ResidualAdd");
              check_positions(x.positions, "ResidualAdd");
              if (x.vector.rows() != 1 || x.vector.cols() != c.d_model)
                throw std::invalid_argument("ResidualAdd: vector must be 1 x d_model");
            } else if constexpr (std::is_same_v<T, HeadOutputReplace>) {
              check_layer(x.layer, c.n_layers - 1, "HeadOutputReplace");
              check_head(x.head, "HeadOutputReplace");
              check_positions(x.positions, "HeadOutputReplace");
              if (x.source.rows() != static_cast<Eigen::Index>(x.positions.size()) || x.source.cols() != c.d_model)
                throw std::invalid_argument("HeadOutputReplace: source shape mismatch");
              for (int p : x.positions)
                if (!replaced.insert({1, x.layer, x.head, p}).second)
                  throw std::invalid_argument("HeadOutputReplace: position replaced twice");
            } else {
              check_layer(x.layer, c.n_layers - 1, "HeadZero");
              check_head(x.head, "HeadZero");
            }
          },
          e);
    }
  }

  bool touches_heads(int layer) const {
    for (const auto& e : edits) {
      if (auto* r = std::get_if<HeadOutputReplace>(&e); r && r->layer == layer) return true;
      if (auto* z = std::get_if<HeadZero>(&e); z && z->layer == layer) return true;
    }
    return false;
  }
};

// ---------------------------------------------------------------------------
// Forward

struct ForwardOptions {
  const CapturePlan* capture = nullptr;
  const InterventionPlan* plan = nullptr;
  // Rows of the returned logits; empty means the last position only.
  std::vector<int> logit_positions;
  // Resume from a recorded residual stream at start_layer (the stream the
  // block start_layer consumes, before that point's edits).
  int start_layer = 0;
  const MatF* start_resid = nullptr;
};

template <class S>
struct LayerCache {
  Mat<S> x_in, rms1, a, q, k, v, z, x_mid, rms2, m, gate, up, hmid;
  std::vector<Mat<S>> probs;
};

template <class S>
struct ForwardCache {
  std::vector<LayerCache<S>> layers;
  Mat<S> x_final;
};

template <class S>
struct ForwardResult {
  Mat<S> logits;  // one row per requested position
  std::vector<int> positions;
  ActivationTrace trace;
};

namespace detail {

template <class S>
Mat<S> rms_norm(const Mat<S>& x, const Mat<S>& gain, double eps, Mat<S>& inv_rms) {
  const Eigen::Index T = x.rows(), d = x.cols();
  inv_rms.resize(T, 1);
  Mat<S> out(T, d);
  for (Eigen::Index t = 0; t < T; ++t) {
    const S ms = x.row(t).squaredNorm() / static_cast<S>(d);
    inv_rms(t, 0) = S(1) / std::sqrt(ms + static_cast<S>(eps));
    out.row(t) = (x.row(t) * inv_rms(t, 0)).cwiseProduct(gain);
  }
  return out;
}

// Gradient of y = gain * x * r(x) with respect to x, accumulating dgain.
template <class S>
Mat<S> rms_norm_backward(const Mat<S>& x, const Mat<S>& inv_rms, const Mat<S>& gain, const Mat<S>& dy, Mat<S>& dgain) {
  const Eigen::Index T = x.rows(), d = x.cols();
  Mat<S> dx(T, d);
  for (Eigen::Index t = 0; t < T; ++t) {
    const S r = inv_rms(t, 0);
    const auto n = (x.row(t) * r).eval();
    dgain += dy.row(t).cwiseProduct(n);
    const auto dn = dy.row(t).cwiseProduct(gain).eval();
    const S proj = dn.dot(n) / static_cast<S>(d);
    dx.row(t) = r * (dn - n * proj);
  }
  return dx;
}

// In-place rotation of every head slice of a T x d matrix; sign = -1 applies
// the inverse rotation.
template <class S>
void rope_rows(Mat<S>& x, const RopeTable& rope, int n_heads, int d_head, double sign = 1.0) {
  const int half = d_head / 2;
  for (Eigen::Index t = 0; t < x.rows(); ++t) {
    const double* cs = rope.cos.data() + t * half;
    const double* sn = rope.sin.data() + t * half;
    S* row = x.row(t).data();
    for (int h = 0; h < n_heads; ++h) {
      S* v = row + h * d_head;
      for (int i = 0; i < half; ++i) {
        const S c = static_cast<S>(cs[i]), s = static_cast<S>(sign * sn[i]);
        const S a = v[2 * i], b = v[2 * i + 1];
        v[2 * i] = a * c - b * s;
        v[2 * i + 1] = a * s + b * c;
      }
    }
  }
}

template <class S>
void causal_softmax(Mat<S>& scores) {
  const Eigen::Index T = scores.rows();
  for (Eigen::Index i = 0; i < T; ++i) {
    S* row = scores.row(i).data();
    S mx = row[0];
    for (Eigen::Index j = 1; j <= i; ++j) mx = std::max(mx, row[j]);
    S sum = 0;
    for (Eigen::Index j = 0; j <= i; ++j) {
      row[j] = std::exp(row[j] - mx);
      sum += row[j];
    }
    const S inv = S(1) / sum;
    for (Eigen::Index j = 0; j <= i; ++j) row[j] *= inv;
    for (Eigen::Index j = i + 1; j < T; ++j) row[j] = 0;
  }
}

template <class S>
S sigmoid(S x) {
  return S(1) / (S(1) + std::exp(-x));
}

template <class S>
void apply_resid_point(int layer, Mat<S>& x, const ForwardOptions& opts, ActivationTrace& trace) {
  if (opts.plan) {
    for (const auto& e : opts.plan->edits)
      if (auto* r = std::get_if<ResidualReplace>(&e); r && r->layer == layer)
        for (std::size_t j = 0; j < r->positions.size(); ++j)
          x.row(r->positions[j]) = r->source.row(static_cast<Eigen::Index>(j)).template cast<S>();
    for (const auto& e : opts.plan->edits)
      if (auto* a = std::get_if<ResidualAdd>(&e); a && a->layer == layer) {
        const auto v = a->vector.template cast<S>().eval();
        for (int p : a->positions) x.row(p) += v;
      }
  }
  if (opts.capture && opts.capture->wants(HookPoint::resid(layer)))
    trace.tensors[HookPoint::resid(layer).name()] = x.template cast<float>();
}

}  // namespace detail

template <class S>
ForwardResult<S> forward_impl(const Model<S>& model, std::span<const int> tokens, const ForwardOptions& opts,
                              ForwardCache<S>* cache) {
  const ModelConfig& c = model.config;
  const int T = static_cast<int>(tokens.size());
  if (T == 0) throw std::invalid_argument("forward: empty token sequence");
  if (T > c.max_seq_len) throw std::length_error("forward: sequence longer than max_seq_len");
  for (int id : tokens)
    if (id < 0 || id >= c.vocab_size) throw std::out_of_range("forward: token id outside vocabulary");
  if (opts.plan) opts.plan->validate(c, T);
  if (cache && opts.plan && !opts.plan->empty())
    throw std::logic_error("forward: cached (training) passes do not take interventions");
  if (opts.start_layer < 0 || opts.start_layer > c.n_layers) throw std::out_of_range("forward: bad start_layer");

  const int d = c.d_model, H = c.n_heads, dh = c.d_head;
  const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
  ForwardResult<S> res;
  auto& trace = res.trace;

  Mat<S> x;
  if (opts.start_resid) {
    if (opts.start_resid->rows() != T || opts.start_resid->cols() != d)
      throw std::invalid_argument("forward: start_resid shape mismatch");
    x = opts.start_resid->template cast<S>();
  } else {
    if (opts.start_layer != 0) throw std::invalid_argument("forward: start_layer needs start_resid");
    x.resize(T, d);
    for (int t = 0; t < T; ++t) x.row(t) = model.w.embed.row(tokens[t]);
  }
  detail::apply_resid_point(opts.start_layer, x, opts, trace);
  if (cache) cache->layers.resize(static_cast<std::size_t>(c.n_layers));

  for (int l = opts.start_layer; l < c.n_layers; ++l) {
    const auto& L = model.w.layers[static_cast<std::size_t>(l)];
    LayerCache<S> local;
    LayerCache<S>& lc = cache ? cache->layers[static_cast<std::size_t>(l)] : local;

    lc.x_in = x;
    lc.a = detail::rms_norm(x, L.attn_norm, c.norm_eps, lc.rms1);
    lc.q.noalias() = lc.a * L.wq;
    lc.k.noalias() = lc.a * L.wk;
    lc.v.noalias() = lc.a * L.wv;
    if (opts.capture)
      for (int h = 0; h < H; ++h) {
        if (opts.capture->wants(HookPoint::q_pre(l, h)))
          trace.tensors[HookPoint::q_pre(l, h).name()] = lc.q.middleCols(h * dh, dh).template cast<float>();
        if (opts.capture->wants(HookPoint::k_pre(l, h)))
          trace.tensors[HookPoint::k_pre(l, h).name()] = lc.k.middleCols(h * dh, dh).template cast<float>();
      }
    detail::rope_rows(lc.q, model.rope, H, dh);
    detail::rope_rows(lc.k, model.rope, H, dh);

    lc.z.resize(T, d);
    lc.probs.resize(static_cast<std::size_t>(H));
    for (int h = 0; h < H; ++h) {
      Mat<S>& P = lc.probs[static_cast<std::size_t>(h)];
      P.noalias() = lc.q.middleCols(h * dh, dh) * lc.k.middleCols(h * dh, dh).transpose();
      P *= scale;
      detail::causal_softmax(P);
      lc.z.middleCols(h * dh, dh).noalias() = P * lc.v.middleCols(h * dh, dh);
      if (opts.capture && opts.capture->wants(HookPoint::attn(l, h)))
        trace.tensors[HookPoint::attn(l, h).name()] = P.template cast<float>();
    }

    const bool head_level = (opts.plan && opts.plan->touches_heads(l)) ||
                            (opts.capture && opts.capture->wants_head_level(l, H));
    Mat<S> attn_out;
    if (!head_level) {
      attn_out.noalias() = lc.z * L.wo;
    } else {
      attn_out = Mat<S>::Zero(T, d);
      for (int h = 0; h < H; ++h) {
        Mat<S> o;
        o.noalias() = lc.z.middleCols(h * dh, dh) * L.wo.middleRows(h * dh, dh);
        if (opts.plan) {
          for (const auto& e : opts.plan->edits)
            if (auto* r = std::get_if<HeadOutputReplace>(&e); r && r->layer == l && r->head == h)
              for (std::size_t j = 0; j < r->positions.size(); ++j)
                o.row(r->positions[j]) = r->source.row(static_cast<Eigen::Index>(j)).template cast<S>();
          for (const auto& e : opts.plan->edits)
            if (auto* zr = std::get_if<HeadZero>(&e); zr && zr->layer == l && zr->head == h) o.setZero();
        }
        if (opts.capture && opts.capture->wants(HookPoint::head_out(l, h)))
          trace.tensors[HookPoint::head_out(l, h).name()] = o.template cast<float>();
        attn_out += o;
      }
    }

    lc.x_mid = x + attn_out;
    lc.m = detail::rms_norm(lc.x_mid, L.mlp_norm, c.norm_eps, lc.rms2);
    lc.gate.noalias() = lc.m * L.w_gate;
    lc.up.noalias() = lc.m * L.w_up;
    lc.hmid.resize(T, c.d_mlp);
    for (Eigen::Index i = 0; i < lc.gate.size(); ++i) {
      const S g = lc.gate.data()[i];
      lc.hmid.data()[i] = g * detail::sigmoid(g) * lc.up.data()[i];
    }
    x = lc.x_mid;
    x.noalias() += lc.hmid * L.w_down;
    detail::apply_resid_point(l + 1, x, opts, trace);
  }
  if (cache) cache->x_final = x;

  std::vector<int> positions = opts.logit_positions;
  if (positions.empty()) positions.push_back(T - 1);
  const bool want_all = opts.capture && opts.capture->wants(HookPoint::logits());
  Mat<S> inv;
  if (want_all) {
    Mat<S> all = detail::rms_norm(x, model.w.final_norm, c.norm_eps, inv) * model.w.unembed;
    trace.tensors["logits"] = all.template cast<float>();
    res.logits.resize(static_cast<Eigen::Index>(positions.size()), c.vocab_size);
    for (std::size_t i = 0; i < positions.size(); ++i) res.logits.row(static_cast<Eigen::Index>(i)) = all.row(positions[i]);
  } else {
    Mat<S> rows(static_cast<Eigen::Index>(positions.size()), d);
    for (std::size_t i = 0; i < positions.size(); ++i) {
      if (positions[i] < 0 || positions[i] >= T) throw std::out_of_range("forward: logit position out of range");
      rows.row(static_cast<Eigen::Index>(i)) = x.row(positions[i]);
    }
    res.logits.noalias() = detail::rms_norm(rows, model.w.final_norm, c.norm_eps, inv) * model.w.unembed;
  }
  res.positions = std::move(positions);
  return res;
}

template <class S>
ForwardResult<S> forward(const Model<S>& model, std::span<const int> tokens, const ForwardOptions& opts = {}) {
  return forward_impl<S>(model, tokens, opts, nullptr);
}

// ---------------------------------------------------------------------------
// Loss and backward

struct LossTarget {
  int position = 0;  // logits row that predicts `token`
  int token = 0;
  double weight = 1.0;
};

// Weighted cross-entropy sum over targets; gradients are accumulated into
// grads (not zeroed here).
template <class S>
double loss_and_grad(const Model<S>& model, std::span<const int> tokens, std::span<const LossTarget> targets,
                     Params<S>* grads) {
  const ModelConfig& c = model.config;
  const int T = static_cast<int>(tokens.size());
  const int d = c.d_model, H = c.n_heads, dh = c.d_head;
  const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
  ForwardCache<S> cache;
  ForwardOptions fo;
  for (const auto& t : targets) fo.logit_positions.push_back(t.position);
  if (fo.logit_positions.empty()) return 0.0;
  forward_impl<S>(model, tokens, fo, &cache);

  // Final norm + unembedding.
  const Eigen::Index K = static_cast<Eigen::Index>(targets.size());
  Mat<S> rows(K, d);
  for (Eigen::Index i = 0; i < K; ++i) rows.row(i) = cache.x_final.row(targets[static_cast<std::size_t>(i)].position);
  Mat<S> inv;
  const Mat<S> y = detail::rms_norm(rows, model.w.final_norm, c.norm_eps, inv);
  Mat<S> logits = y * model.w.unembed;
  double loss = 0.0;
  Mat<S> dlogits(K, c.vocab_size);
  for (Eigen::Index i = 0; i < K; ++i) {
    const auto& tg = targets[static_cast<std::size_t>(i)];
    auto row = logits.row(i);
    const S mx = row.maxCoeff();
    const auto e = (row.array() - mx).exp().eval();
    const S sum = e.sum();
    loss += tg.weight * (static_cast<double>(std::log(sum)) + mx - row(tg.token));
    dlogits.row(i) = (e / sum).matrix() * static_cast<S>(tg.weight);
    dlogits(i, tg.token) -= static_cast<S>(tg.weight);
  }
  if (!grads) return loss;
  auto& g = *grads;

  g.unembed.noalias() += y.transpose() * dlogits;
  const Mat<S> dy = dlogits * model.w.unembed.transpose();
  const Mat<S> drows = detail::rms_norm_backward(rows, inv, model.w.final_norm, dy, g.final_norm);
  Mat<S> dx = Mat<S>::Zero(T, d);
  for (Eigen::Index i = 0; i < K; ++i) dx.row(targets[static_cast<std::size_t>(i)].position) += drows.row(i);

  for (int l = c.n_layers - 1; l >= 0; --l) {
    const auto& L = model.w.layers[static_cast<std::size_t>(l)];
    auto& G = g.layers[static_cast<std::size_t>(l)];
    const auto& lc = cache.layers[static_cast<std::size_t>(l)];

    // MLP.
    G.w_down.noalias() += lc.hmid.transpose() * dx;
    Mat<S> dh_mid = dx * L.w_down.transpose();
    Mat<S> dgate(T, c.d_mlp), dup(T, c.d_mlp);
    for (Eigen::Index i = 0; i < dgate.size(); ++i) {
      const S gt = lc.gate.data()[i];
      const S sg = detail::sigmoid(gt);
      const S dhv = dh_mid.data()[i];
      dup.data()[i] = dhv * gt * sg;
      dgate.data()[i] = dhv * lc.up.data()[i] * sg * (S(1) + gt * (S(1) - sg));
    }
    G.w_gate.noalias() += lc.m.transpose() * dgate;
    G.w_up.noalias() += lc.m.transpose() * dup;
    Mat<S> dm = dgate * L.w_gate.transpose();
    dm.noalias() += dup * L.w_up.transpose();
    Mat<S> dx_mid = dx + detail::rms_norm_backward(lc.x_mid, lc.rms2, L.mlp_norm, dm, G.mlp_norm);

    // Attention.
    G.wo.noalias() += lc.z.transpose() * dx_mid;
    const Mat<S> dz = dx_mid * L.wo.transpose();
    Mat<S> dq(T, d), dk(T, d), dv(T, d);
    for (int h = 0; h < H; ++h) {
      const Mat<S>& P = lc.probs[static_cast<std::size_t>(h)];
      const auto dzh = dz.middleCols(h * dh, dh);
      Mat<S> dP = dzh * lc.v.middleCols(h * dh, dh).transpose();
      dv.middleCols(h * dh, dh).noalias() = P.transpose() * dzh;
      for (Eigen::Index i = 0; i < T; ++i) {
        const S dotp = dP.row(i).head(i + 1).dot(P.row(i).head(i + 1));
        for (Eigen::Index j = 0; j <= i; ++j) dP(i, j) = P(i, j) * (dP(i, j) - dotp) * scale;
        for (Eigen::Index j = i + 1; j < T; ++j) dP(i, j) = 0;
      }
      dq.middleCols(h * dh, dh).noalias() = dP * lc.k.middleCols(h * dh, dh);
      dk.middleCols(h * dh, dh).noalias() = dP.transpose() * lc.q.middleCols(h * dh, dh);
    }
    detail::rope_rows(dq, model.rope, H, dh, -1.0);
    detail::rope_rows(dk, model.rope, H, dh, -1.0);
    G.wq.noalias() += lc.a.transpose() * dq;
    G.wk.noalias() += lc.a.transpose() * dk;
    G.wv.noalias() += lc.a.transpose() * dv;
    Mat<S> da = dq * L.wq.transpose();
    da.noalias() += dk * L.wk.transpose();
    da.noalias() += dv * L.wv.transpose();
    dx = dx_mid + detail::rms_norm_backward(lc.x_in, lc.rms1, L.attn_norm, da, G.attn_norm);
  }
  for (int t = 0; t < T; ++t) g.embed.row(tokens[t]) += dx.row(t);
  return loss;
}

// ---------------------------------------------------------------------------
// Checkpoints

template <class S>
TensorFile model_to_tensor_file(const Model<S>& m) {
  TensorFile f;
  f.meta["kind"] = "model";
  f.meta["config"] = m.config;
  m.w.visit([&](const std::string& name, std::string_view, const Mat<S>& t) {
    std::vector<float> data(static_cast<std::size_t>(t.size()));
    for (Eigen::Index i = 0; i < t.size(); ++i) data[static_cast<std::size_t>(i)] = static_cast<float>(t.data()[i]);
    f.add(name, {static_cast<std::uint64_t>(t.rows()), static_cast<std::uint64_t>(t.cols())}, std::move(data));
  });
  return f;
}

template <class S>
Model<S> model_from_tensor_file(const TensorFile& f) {
  Model<S> m;
  m.config = f.meta.at("config").get<ModelConfig>();
  m.config.validate();
  m.w = Params<S>::zeros(m.config);
  m.w.visit([&](const std::string& name, std::string_view, Mat<S>& t) {
    const auto& r = f.get(name);
    if (r.shape.size() != 2 || r.shape[0] != static_cast<std::uint64_t>(t.rows()) ||
        r.shape[1] != static_cast<std::uint64_t>(t.cols()))
      throw std::runtime_error("checkpoint: shape mismatch for " + name);
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = static_cast<S>(r.data[static_cast<std::size_t>(i)]);
  });
  m.build_rope();
  return m;
}

template <class S>
void save_model(const std::string& path, const Model<S>& m, const nlohmann::json& extra = {}) {
  auto f = model_to_tensor_file(m);
  if (!extra.is_null()) f.meta["extra"] = extra;
  write_tensor_file(path, f);
}

template <class S>
Model<S> load_model(const std::string& path) {
  return model_from_tensor_file<S>(read_tensor_file(path));
}

}  // namespace tablelab
