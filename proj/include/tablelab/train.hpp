#pragma once

// Adam training on answer-token cross-entropy, greedy decoding, exact-match
// evaluation and finite-difference gradient checks.

#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "tablelab/model.hpp"
#include "tablelab/parallel.hpp"
#include "tablelab/prompt.hpp"

namespace tablelab {

struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrainExample {
  std::vector<int> tokens;
  std::vector<LossTarget> targets;
};

// Prompt + answer + stop token. With full_sequence_loss every next-token
// prediction is scored and answer predictions get answer_weight.
inline TrainExample make_train_example(const PromptInstance& p, bool full_sequence_loss = false,
                                       double answer_weight = 1.0) {
  TrainExample ex;
  ex.tokens = p.token_ids;
  ex.tokens.insert(ex.tokens.end(), p.answer_ids.begin(), p.answer_ids.end());
  ex.tokens.push_back(Vocab::newline);
  const int first = p.answer_position - 1;
  const int last = static_cast<int>(ex.tokens.size()) - 2;
  const int begin = full_sequence_loss ? 0 : first;
  for (int t = begin; t <= last; ++t)
    ex.targets.push_back({t, ex.tokens[static_cast<std::size_t>(t) + 1], t >= first ? answer_weight : 1.0});
  return ex;
}

// Appends "Q: ... A: answer \n" for further queries over the same table. The
// first query keeps its evaluation-time position; later ones only add signal.
inline void append_followup_queries(TrainExample& ex, const Vocab& vocab, const Table& table,
                                    std::span<const QuerySpec> queries, double answer_weight = 1.0) {
  for (const auto& q : queries) {
    detail::append_question(vocab, table, q, ex.tokens);
    const int first = static_cast<int>(ex.tokens.size()) - 1;
    const auto ans = detail::answer_tokens(vocab, table, q);
    ex.tokens.insert(ex.tokens.end(), ans.begin(), ans.end());
    ex.tokens.push_back(Vocab::newline);
    const int last = static_cast<int>(ex.tokens.size()) - 2;
    for (int t = first; t <= last; ++t) ex.targets.push_back({t, ex.tokens[static_cast<std::size_t>(t) + 1], answer_weight});
  }
}

struct TrainConfig {
  int steps = 4000;
  int batch_size = 16;
  double lr = 1e-3;
  double lr_min_ratio = 0.1;
  int warmup_steps = 100;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-8;
  double weight_decay = 0.01;
  double grad_clip = 1.0;
  int eval_interval = 250;
  int eval_samples = 200;
  bool full_sequence_loss = false;
  double answer_weight = 5.0;
  std::uint64_t seed = 1;
  double time_budget_s = 0.0;  // 0 = no limit
  double stop_at_em = 0.0;     // stop once held-out EM reaches this (0 = off)
  int threads = 1;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainConfig, steps, batch_size, lr, lr_min_ratio, warmup_steps, beta1,
                                                beta2, adam_eps, weight_decay, grad_clip, eval_interval, eval_samples,
                                                full_sequence_loss, answer_weight, seed, time_budget_s, stop_at_em,
                                                threads)

struct MetricPoint {
  int step = 0;
  double loss = 0.0;
  double heldout_em = -1.0;
  double train_em = -1.0;
  double elapsed_s = 0.0;
  double lr = 0.0;
};

inline nlohmann::json to_json(const MetricPoint& m) {
  return {{"step", m.step}, {"loss", m.loss}, {"heldout_em", m.heldout_em}, {"train_em", m.train_em},
          {"elapsed_s", m.elapsed_s}, {"lr", m.lr}};
}

struct TrainResult {
  std::vector<MetricPoint> metrics;
  int steps_done = 0;
  double final_heldout_em = -1.0;
  double elapsed_s = 0.0;
  bool stopped_on_budget = false;
};

// ---------------------------------------------------------------------------
// Decoding

// Greedy argmax (lowest id wins ties) until max_tokens or the stop token.
template <class S>
std::vector<int> decode_answer(const Model<S>& model, std::span<const int> prompt, int max_tokens,
                               const InterventionPlan* plan = nullptr) {
  std::vector<int> seq(prompt.begin(), prompt.end());
  std::vector<int> out;
  ForwardOptions fo;
  fo.plan = plan;
  for (int i = 0; i < max_tokens; ++i) {
    const auto res = forward(model, seq, fo);
    Eigen::Index best = 0;
    res.logits.row(0).maxCoeff(&best);
    const int tok = static_cast<int>(best);
    if (tok == Vocab::newline) break;
    out.push_back(tok);
    seq.push_back(tok);
  }
  return out;
}

template <class S>
std::vector<int> decode_answer(const Model<S>& model, const PromptInstance& p, const InterventionPlan* plan = nullptr) {
  return decode_answer(model, p.token_ids, static_cast<int>(p.answer_ids.size()), plan);
}

// Fraction of prompts whose decoded answer equals the gold token sequence.
template <class S>
double em_eval(const Model<S>& model, std::span<const PromptInstance> prompts, const InterventionPlan* plan = nullptr,
               int threads = 1) {
  if (prompts.empty()) return 0.0;
  std::vector<char> hit(prompts.size(), 0);
  parallel_for(prompts.size(), threads, [&](std::size_t i) {
    hit[i] = decode_answer(model, prompts[i], plan) == prompts[i].answer_ids ? 1 : 0;
  });
  return static_cast<double>(std::accumulate(hit.begin(), hit.end(), 0)) / static_cast<double>(prompts.size());
}

// ---------------------------------------------------------------------------
// Training

template <class S>
class AdamState {
 public:
  explicit AdamState(const ModelConfig& c) : m_(Params<S>::zeros(c)), v_(Params<S>::zeros(c)) {}

  void step(Params<S>& w, const Params<S>& g, const TrainConfig& cfg, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg.beta1, t_);
    const double bc2 = 1.0 - std::pow(cfg.beta2, t_);
    std::vector<Mat<S>*> ms, vs;
    m_.visit([&](const std::string&, std::string_view, Mat<S>& x) { ms.push_back(&x); });
    v_.visit([&](const std::string&, std::string_view, Mat<S>& x) { vs.push_back(&x); });
    std::vector<const Mat<S>*> gs;
    g.visit([&](const std::string&, std::string_view, const Mat<S>& x) { gs.push_back(&x); });
    std::size_t i = 0;
    w.visit([&](const std::string&, std::string_view fam, Mat<S>& p) {
      Mat<S>& m = *ms[i];
      Mat<S>& v = *vs[i];
      const Mat<S>& gr = *gs[i];
      ++i;
      const S b1 = static_cast<S>(cfg.beta1), b2 = static_cast<S>(cfg.beta2);
      m = b1 * m + (S(1) - b1) * gr;
      v = b2 * v + (S(1) - b2) * gr.cwiseProduct(gr);
      const S step = static_cast<S>(lr / bc1);
      const S inv_bc2 = static_cast<S>(1.0 / bc2);
      const S eps = static_cast<S>(cfg.adam_eps);
      if (cfg.weight_decay > 0 && !is_norm_family(fam) && fam != "embed")
        p *= static_cast<S>(1.0 - lr * cfg.weight_decay);
      p.array() -= step * m.array() / ((v.array() * inv_bc2).sqrt() + eps);
    });
  }

 private:
  Params<S> m_, v_;
  int t_ = 0;
};

inline double lr_at(const TrainConfig& cfg, int step) {
  if (cfg.warmup_steps > 0 && step < cfg.warmup_steps) return cfg.lr * (step + 1) / cfg.warmup_steps;
  const double span = std::max(1, cfg.steps - cfg.warmup_steps);
  const double prog = std::min(1.0, (step - cfg.warmup_steps) / span);
  const double min_lr = cfg.lr * cfg.lr_min_ratio;
  return min_lr + 0.5 * (cfg.lr - min_lr) * (1.0 + std::cos(M_PI * prog));
}

template <class S>
double global_norm(const Params<S>& g) {
  double s = 0.0;
  g.visit([&](const std::string&, std::string_view, const Mat<S>& x) { s += static_cast<double>(x.squaredNorm()); });
  return std::sqrt(s);
}

// One optimizer step over a batch. Returns mean weighted loss per target.
template <class S>
double train_step(Model<S>& model, AdamState<S>& opt, Params<S>& grads, std::span<const TrainExample* const> batch,
                  const TrainConfig& cfg, double lr) {
  grads.set_zero();
  double loss = 0.0, weight = 0.0;
  for (const TrainExample* ex : batch) {
    loss += loss_and_grad(model, ex->tokens, ex->targets, &grads);
    for (const auto& t : ex->targets) weight += t.weight;
  }
  if (weight <= 0) return 0.0;
  const S inv = static_cast<S>(1.0 / weight);
  grads.visit([&](const std::string&, std::string_view, Mat<S>& x) { x *= inv; });
  const double gn = global_norm(grads);
  if (!std::isfinite(gn) || !std::isfinite(loss))
    throw NumericalError("training diverged: non-finite loss or gradient (loss=" + std::to_string(loss) + ")");
  if (cfg.grad_clip > 0 && gn > cfg.grad_clip) {
    const S s = static_cast<S>(cfg.grad_clip / gn);
    grads.visit([&](const std::string&, std::string_view, Mat<S>& x) { x *= s; });
  }
  if (lr != 0.0) opt.step(model.w, grads, cfg, lr);
  return loss / weight;
}

using MetricCallback = std::function<void(const MetricPoint&)>;

template <class S>
TrainResult train(Model<S>& model, std::span<const TrainExample> data, std::span<const PromptInstance> heldout,
                  const TrainConfig& cfg, const MetricCallback& on_metric = {},
                  std::span<const PromptInstance> train_probe = {}) {
  if (data.empty()) throw std::invalid_argument("train: empty dataset");
  using clock = std::chrono::steady_clock;
  const auto t0 = clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(clock::now() - t0).count(); };

  TrainResult result;
  AdamState<S> opt(model.config);
  Params<S> grads = Params<S>::zeros(model.config);
  Rng rng = make_stream(cfg.seed, 0x7a1);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t cursor = 0;

  const auto eval_set = heldout.subspan(0, std::min<std::size_t>(heldout.size(), static_cast<std::size_t>(cfg.eval_samples)));
  const auto probe_set =
      train_probe.subspan(0, std::min<std::size_t>(train_probe.size(), static_cast<std::size_t>(cfg.eval_samples)));
  double loss_acc = 0.0;
  int loss_n = 0;
  std::vector<const TrainExample*> batch;
  for (int step = 0; step < cfg.steps; ++step) {
    batch.clear();
    for (int b = 0; b < cfg.batch_size; ++b) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      batch.push_back(&data[order[cursor++]]);
    }
    const double lr = lr_at(cfg, step);
    loss_acc += train_step(model, opt, grads, batch, cfg, lr);
    ++loss_n;
    result.steps_done = step + 1;

    const bool last = step + 1 == cfg.steps;
    const bool over_budget = cfg.time_budget_s > 0 && elapsed() > cfg.time_budget_s;
    if ((cfg.eval_interval > 0 && (step + 1) % cfg.eval_interval == 0) || last || over_budget) {
      MetricPoint mp;
      mp.step = step + 1;
      mp.loss = loss_acc / std::max(1, loss_n);
      mp.lr = lr;
      if (!eval_set.empty()) mp.heldout_em = em_eval(model, eval_set, nullptr, cfg.threads);
      if (!probe_set.empty()) mp.train_em = em_eval(model, probe_set, nullptr, cfg.threads);
      mp.elapsed_s = elapsed();
      loss_acc = 0.0;
      loss_n = 0;
      result.metrics.push_back(mp);
      result.final_heldout_em = mp.heldout_em;
      if (on_metric) on_metric(mp);
      if (cfg.stop_at_em > 0 && mp.heldout_em >= cfg.stop_at_em) break;
    }
    if (over_budget) {
      result.stopped_on_budget = true;
      break;
    }
  }
  result.elapsed_s = elapsed();
  return result;
}

// ---------------------------------------------------------------------------
// Gradient check

struct GradCheckReport {
  double max_rel_err = 0.0;
  int n_checked = 0;
  std::map<std::string, double> family_max_rel_err;
  std::map<std::string, int> family_count;
};

// Central differences on randomly chosen coordinates, at least
// per_family coordinates from every parameter family. Embedding rows are
// drawn from tokens that occur in the batch.
template <class S>
GradCheckReport grad_check(Model<S> model, std::span<const TrainExample> batch, double epsilon, int per_family,
                           std::uint64_t seed) {
  auto total_loss = [&](const Model<S>& m, Params<S>* g) {
    double l = 0.0;
    for (const auto& ex : batch) l += loss_and_grad(m, ex.tokens, ex.targets, g);
    return l;
  };
  Params<S> grads = Params<S>::zeros(model.config);
  total_loss(model, &grads);

  std::vector<int> present;
  for (const auto& ex : batch) present.insert(present.end(), ex.tokens.begin(), ex.tokens.end());
  std::sort(present.begin(), present.end());
  present.erase(std::unique(present.begin(), present.end()), present.end());

  Rng rng = make_stream(seed, 0x6c4);
  GradCheckReport rep;
  std::vector<std::pair<std::string, Mat<S>*>> tensors;
  std::vector<std::string> families;
  model.w.visit([&](const std::string& n, std::string_view fam, Mat<S>& t) {
    tensors.emplace_back(n, &t);
    families.emplace_back(fam);
  });
  std::vector<const Mat<S>*> gtensors;
  grads.visit([&](const std::string&, std::string_view, const Mat<S>& t) { gtensors.push_back(&t); });

  for (std::size_t ti = 0; ti < tensors.size(); ++ti) {
    Mat<S>& t = *tensors[ti].second;
    const std::string& fam = families[ti];
    for (int k = 0; k < per_family; ++k) {
      Eigen::Index r = static_cast<Eigen::Index>(uniform_index(rng, static_cast<std::size_t>(t.rows())));
      if (fam == "embed") r = present[uniform_index(rng, present.size())];
      const Eigen::Index c = static_cast<Eigen::Index>(uniform_index(rng, static_cast<std::size_t>(t.cols())));
      const S orig = t(r, c);
      t(r, c) = orig + static_cast<S>(epsilon);
      const double lp = total_loss(model, nullptr);
      t(r, c) = orig - static_cast<S>(epsilon);
      const double lm = total_loss(model, nullptr);
      t(r, c) = orig;
      const double numeric = (lp - lm) / (2.0 * epsilon);
      const double analytic = static_cast<double>((*gtensors[ti])(r, c));
      const double err = std::abs(numeric - analytic) / std::max(1e-8, std::abs(numeric) + std::abs(analytic));
      rep.max_rel_err = std::max(rep.max_rel_err, err);
      rep.family_max_rel_err[fam] = std::max(rep.family_max_rel_err[fam], err);
      ++rep.family_count[fam];
      ++rep.n_checked;
    }
  }
  return rep;
}

}  // namespace tablelab
