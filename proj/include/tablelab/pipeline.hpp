#pragma once

// Run configuration, run directory bookkeeping and the analysis stages behind
// the command-line tool.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tablelab/binding.hpp"
#include "tablelab/coords.hpp"
#include "tablelab/dataset.hpp"
#include "tablelab/geometry.hpp"
#include "tablelab/model.hpp"
#include "tablelab/multicell.hpp"
#include "tablelab/patchkit.hpp"
#include "tablelab/svg.hpp"
#include "tablelab/train.hpp"

namespace tablelab {

inline constexpr const char* kVersion = "0.1.0";

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct PrerequisiteError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Configuration

struct AnalysisConfig {
  int n_patch = 100;          // clean/corrupt pairs per patching sweep
  int n_probe = 100;          // prompts for discovery, probes and extraction
  int n_ablation = 200;       // atomic prompts for ablation and noise runs
  int n_multicell = 100;      // prompts per multi-cell split
  int n_steer = 100;          // prompts for steering evaluation
  int alignment_top_k = 20;
  int coord_top_k = 20;
  int probe_head_top_k = 20;
  int random_seeds = 3;
  double mover_attn_threshold = 0.3;
  double mover_sample_fraction = 0.7;
  double probe_lambda = 1.0;
  int n_permutations = 200;
  double denom_eps = 1e-3;
  std::string patch_direction = "restore";
  double steer_alpha = 8.0;
  std::vector<int> steer_window;  // empty = middle third of the layers
  bool steer_global_average = false;
  std::vector<int> steer_ks{-3, -2, -1, 0, 1, 2, 3};
  std::vector<int> compose_ks{-3, -2, -1, 1, 2, 3};
  int compose_max_component = 3;
  int noise_amount = 2;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(AnalysisConfig, n_patch, n_probe, n_ablation, n_multicell, n_steer,
                                                alignment_top_k, coord_top_k, probe_head_top_k, random_seeds,
                                                mover_attn_threshold, mover_sample_fraction, probe_lambda, n_permutations,
                                                denom_eps, patch_direction, steer_alpha, steer_window,
                                                steer_global_average, steer_ks, compose_ks, compose_max_component,
                                                noise_amount)

struct RunConfig {
  std::uint64_t seed = 7;
  DatasetConfig dataset;
  ModelConfig model;
  TrainConfig train;
  AnalysisConfig analysis;
  std::string out_dir = "runs/default";
  int threads = 1;

  nlohmann::json to_json() const {
    return {{"seed", seed},         {"dataset", dataset},   {"model", model}, {"train", train},
            {"analysis", analysis}, {"out_dir", out_dir}, {"threads", threads}};
  }

  // Derived seeds follow the top-level seed.
  void apply_seed(std::uint64_t s) {
    seed = s;
    dataset.seed = s;
    train.seed = s;
  }
};

namespace detail {

inline std::string type_name(const nlohmann::json& j) {
  return j.is_number_integer() ? "integer" : j.type_name();
}

// Reads a struct section: unknown keys and type mismatches are reported with
// their field path; missing keys keep their defaults.
template <class T>
T parse_section(const nlohmann::json& j, const std::string& path) {
  const nlohmann::json defaults = T{};
  if (!j.is_object()) throw ConfigError(path + ": expected an object, got " + j.type_name());
  nlohmann::json merged = defaults;
  for (const auto& [k, v] : j.items()) {
    if (!defaults.contains(k)) throw ConfigError(path + "." + k + ": unknown field");
    const auto& d = defaults.at(k);
    const bool ok = (d.is_number_integer() && v.is_number_integer()) || (d.is_number_float() && v.is_number()) ||
                    (d.is_boolean() && v.is_boolean()) || (d.is_string() && v.is_string()) ||
                    (d.is_array() && v.is_array()) || (d.is_number_unsigned() && v.is_number_unsigned());
    if (!ok) throw ConfigError(path + "." + k + ": expected " + type_name(d) + ", got " + type_name(v));
    merged[k] = v;
  }
  try {
    return merged.get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

inline void require(bool ok, const std::string& path, const std::string& what) {
  if (!ok) throw ConfigError(path + ": " + what);
}

}  // namespace detail

inline void validate(const RunConfig& c) {
  using detail::require;
  const auto& d = c.dataset;
  require(d.n_train >= 1, "dataset.n_train", "must be >= 1");
  require(d.n_test >= 2, "dataset.n_test", "must be >= 2");
  require(d.n_categories >= 2, "dataset.n_categories", "must be >= 2");
  require(d.min_rows >= 2 && d.min_rows <= d.max_rows, "dataset.min_rows", "must satisfy 2 <= min_rows <= max_rows");
  require(d.min_cols >= 3 && d.min_cols <= d.max_cols, "dataset.min_cols", "must satisfy 3 <= min_cols <= max_cols");
  require(d.max_cols - 1 <= d.n_categories, "dataset.max_cols", "needs one category per data column");
  require(d.values_per_category >= d.max_rows, "dataset.values_per_category", "must be >= dataset.max_rows");
  require(d.n_key_values < 0 || d.n_key_values >= d.max_rows, "dataset.n_key_values", "must be >= dataset.max_rows");
  require(d.format == "markdown" || d.format == "csv" || d.format == "html", "dataset.format",
          "must be markdown, csv or html");
  require(d.multicell_fraction >= 0 && d.multicell_fraction <= 1, "dataset.multicell_fraction", "must lie in [0, 1]");
  require(d.max_subset >= 2, "dataset.max_subset", "must be >= 2");
  require(d.layout_prob >= 0 && d.layout_prob <= 1, "dataset.layout_prob", "must lie in [0, 1]");
  require(d.followup_queries >= 0, "dataset.followup_queries", "must be >= 0");
  const auto& m = c.model;
  require(m.n_layers >= 1, "model.n_layers", "must be >= 1");
  require(m.n_heads >= 1, "model.n_heads", "must be >= 1");
  require(m.d_model == m.n_heads * m.d_head, "model.d_model", "must equal n_heads * d_head");
  require(m.d_head % 2 == 0, "model.d_head", "must be even");
  require(m.d_mlp >= 1, "model.d_mlp", "must be >= 1");
  require(m.max_seq_len >= 16, "model.max_seq_len", "must be >= 16");
  require(m.precision == "f32", "model.precision", "the pipeline trains f32 models");
  const auto& t = c.train;
  require(t.steps >= 1, "train.steps", "must be >= 1");
  require(t.batch_size >= 1, "train.batch_size", "must be >= 1");
  require(t.lr > 0, "train.lr", "must be > 0");
  const auto& a = c.analysis;
  require(a.n_patch >= 1, "analysis.n_patch", "must be >= 1");
  require(a.n_probe >= 5, "analysis.n_probe", "must be >= 5");
  require(a.n_ablation >= 1, "analysis.n_ablation", "must be >= 1");
  require(a.n_multicell >= 1, "analysis.n_multicell", "must be >= 1");
  require(a.n_steer >= 1, "analysis.n_steer", "must be >= 1");
  require(a.alignment_top_k >= 1 && a.alignment_top_k < m.n_layers * m.n_heads, "analysis.alignment_top_k",
          "must lie in [1, n_layers * n_heads)");
  require(a.coord_top_k >= 1, "analysis.coord_top_k", "must be >= 1");
  require(a.probe_head_top_k >= 1, "analysis.probe_head_top_k", "must be >= 1");
  require(a.random_seeds >= 1, "analysis.random_seeds", "must be >= 1");
  require(a.mover_sample_fraction >= 0 && a.mover_sample_fraction <= 1, "analysis.mover_sample_fraction",
          "must lie in [0, 1]");
  require(a.probe_lambda >= 0, "analysis.probe_lambda", "must be >= 0");
  require(a.patch_direction == "restore" || a.patch_direction == "noise", "analysis.patch_direction",
          "must be restore or noise");
  for (int l : a.steer_window)
    require(l >= 0 && l <= m.n_layers, "analysis.steer_window", "layers must lie in [0, n_layers]");
  require(a.compose_max_component >= 1 && a.compose_max_component <= 6, "analysis.compose_max_component",
          "must lie in [1, 6]");
  require(a.noise_amount >= 0, "analysis.noise_amount", "must be >= 0");
  require(c.threads >= 1, "threads", "must be >= 1");
}

inline RunConfig parse_run_config(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");
  RunConfig c;
  static const std::set<std::string> known{"seed", "dataset", "model", "train", "analysis", "out_dir", "threads", "$schema", "description"};
  for (const auto& [k, v] : j.items())
    if (!known.count(k)) throw ConfigError(k + ": unknown field");
  if (j.contains("dataset")) c.dataset = detail::parse_section<DatasetConfig>(j.at("dataset"), "dataset");
  if (j.contains("model")) c.model = detail::parse_section<ModelConfig>(j.at("model"), "model");
  if (j.contains("train")) c.train = detail::parse_section<TrainConfig>(j.at("train"), "train");
  if (j.contains("analysis")) c.analysis = detail::parse_section<AnalysisConfig>(j.at("analysis"), "analysis");
  if (j.contains("out_dir")) {
    if (!j.at("out_dir").is_string()) throw ConfigError("out_dir: expected string");
    c.out_dir = j.at("out_dir").get<std::string>();
  }
  if (j.contains("threads")) {
    if (!j.at("threads").is_number_integer()) throw ConfigError("threads: expected integer");
    c.threads = j.at("threads").get<int>();
  }
  if (j.contains("seed")) {
    if (!j.at("seed").is_number_unsigned()) throw ConfigError("seed: expected non-negative integer");
    c.apply_seed(j.at("seed").get<std::uint64_t>());
  } else {
    c.seed = c.dataset.seed;
  }
  validate(c);
  return c;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path + ": invalid JSON: " + e.what());
  }
  return parse_run_config(j);
}

// ---------------------------------------------------------------------------
// Checksums and the run directory

inline std::uint64_t fnv1a64(std::string_view data, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : data) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string file_checksum(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return hex64(fnv1a64(ss.str()));
}

inline std::string fmt_num(double v, int prec = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(prec) << v;
  return os.str();
}

class Run {
 public:
  explicit Run(RunConfig cfg) : cfg_(std::move(cfg)), dir_(cfg_.out_dir) {
    std::filesystem::create_directories(dir_);
  }

  const RunConfig& config() const { return cfg_; }
  const std::filesystem::path& dir() const { return dir_; }
  std::filesystem::path path(const std::string& rel) const { return dir_ / rel; }
  bool exists(const std::string& rel) const { return std::filesystem::exists(path(rel)); }

  void require(const std::string& rel, const std::string& producer) const {
    if (!exists(rel))
      throw PrerequisiteError("missing " + path(rel).string() + "; run `tablelab " + producer + "` with this config first");
  }

  void write(const std::string& rel, const std::string& content) const {
    const auto p = path(rel);
    std::filesystem::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + p.string());
    out << content;
  }
  void write_json(const std::string& rel, const nlohmann::json& j) const { write(rel, j.dump(2) + "\n"); }
  nlohmann::json read_json(const std::string& rel, const std::string& producer) const {
    require(rel, producer);
    std::ifstream in(path(rel));
    return nlohmann::json::parse(in);
  }

  const Workspace& workspace() {
    if (!ws_) ws_.emplace(cfg_.dataset, cfg_.model.max_seq_len);
    return *ws_;
  }

  std::vector<Sample> samples(const std::string& split) const {
    const std::string rel = "data/" + split + ".jsonl";
    require(rel, "gen");
    return read_jsonl(path(rel).string());
  }

  Model<float> model() const {
    require("model/model.tbls", "train");
    return load_model<float>(path("model/model.tbls").string());
  }

  std::string config_hash() const { return hex64(fnv1a64(cfg_.to_json().dump())); }

  // Rewrites manifest.json: config, file inventory with checksums, and
  // accumulated per-stage timings (the only run-to-run varying entries).
  void update_manifest(const std::string& stage, double seconds) const {
    nlohmann::json timings = nlohmann::json::object();
    if (exists("timings.json")) {
      std::ifstream in(path("timings.json"));
      timings = nlohmann::json::parse(in);
    }
    timings[stage] = seconds;
    write_json("timings.json", timings);
    nlohmann::json files = nlohmann::json::object();
    std::vector<std::string> rels;
    for (const auto& e : std::filesystem::recursive_directory_iterator(dir_)) {
      if (!e.is_regular_file()) continue;
      const auto rel = std::filesystem::relative(e.path(), dir_).generic_string();
      if (rel == "manifest.json" || rel == "timings.json") continue;
      rels.push_back(rel);
    }
    std::sort(rels.begin(), rels.end());
    for (const auto& r : rels) files[r] = file_checksum(path(r));
    nlohmann::json m{{"tool", "tablelab"},       {"version", kVersion}, {"config_hash", config_hash()},
                     {"config", cfg_.to_json()}, {"files", files},      {"timings", timings}};
    write_json("manifest.json", m);
  }

 private:
  RunConfig cfg_;
  std::filesystem::path dir_;
  std::optional<Workspace> ws_;
};

// ---------------------------------------------------------------------------
// Shared helpers

inline std::vector<PromptInstance> prompts_for(const Workspace& ws, std::span<const Sample> samples) {
  std::vector<PromptInstance> out;
  for (const auto& s : samples) out.push_back(ws.prompt(s));
  return out;
}

template <class T>
std::vector<T> head_of(const std::vector<T>& v, int n) {
  return std::vector<T>(v.begin(), v.begin() + std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(v.size()), n));
}

inline std::vector<Sample> with_axis(const std::vector<Sample>& v, CorruptionAxis axis, int n) {
  std::vector<Sample> out;
  for (const auto& s : v)
    if (s.corruption && s.corruption->axis == axis && static_cast<int>(out.size()) < n) out.push_back(s);
  return out;
}

// Question drawn for a follow-up pair: same kind mix as the corpus, never
// asking for a blanked cell.
inline QuerySpec followup_query(const DatasetConfig& cfg, const Sample& s, Rng& rng) {
  for (int attempt = 0; attempt < 32; ++attempt) {
    QueryKind kind = QueryKind::atomic;
    if (uniform_real(rng) < cfg.multicell_fraction) kind = uniform_real(rng) < 0.5 ? QueryKind::multi_row : QueryKind::multi_col;
    int subset = 1;
    if (kind != QueryKind::atomic) {
      const int cap = kind == QueryKind::multi_row ? s.table.rows() : s.table.cols() - 1;
      subset = uniform_int(rng, 2, std::max(2, std::min(cfg.max_subset, cap)));
    }
    QuerySpec q = make_query(s.table, kind, subset, rng);
    bool ok = true;
    if (s.layout)
      for (auto [r, c] : q.answer_cells()) ok = ok && !s.layout->blank[r][c];
    if (ok) return q;
  }
  return s.query;
}

inline TrainExample training_example(const Workspace& ws, const Sample& s, const TrainConfig& tc) {
  auto ex = make_train_example(ws.prompt(s), tc.full_sequence_loss, tc.answer_weight);
  if (ws.cfg.followup_queries > 0) {
    Rng rng = make_stream(s.seed, (6ULL << 40) + static_cast<std::uint64_t>(s.index));
    std::vector<QuerySpec> qs;
    for (int i = 0; i < ws.cfg.followup_queries; ++i) qs.push_back(followup_query(ws.cfg, s, rng));
    append_followup_queries(ex, ws.vocab, s.table, qs, tc.answer_weight);
  }
  return ex;
}

inline std::string breakdown_csv_header() {
  std::string h = "condition,total";
  for (auto c : kErrorCategories) h += "," + std::string(to_string(c));
  return h + "\n";
}
inline std::string breakdown_csv_row(const std::string& name, const ErrorBreakdown& b) {
  std::string r = name + "," + std::to_string(b.total);
  for (auto c : kErrorCategories) r += "," + std::to_string(b.count(c));
  return r + "\n";
}

inline std::vector<std::string> index_labels(int n, int first = 0, const std::string& prefix = "") {
  std::vector<std::string> out;
  for (int i = 0; i < n; ++i) out.push_back(prefix + std::to_string(first + i));
  return out;
}

// ---------------------------------------------------------------------------
// Stages

inline void stage_gen(Run& run) {
  const auto& c = run.config();
  const auto& ws = run.workspace();
  const auto& a = c.analysis;
  write_jsonl(run.path("data/train.jsonl").string(),
              generate_samples(c.dataset, ws.pool, "train", SampleMix::training, c.dataset.n_train));
  write_jsonl(run.path("data/test.jsonl").string(), generate_samples(c.dataset, ws.pool, "test", SampleMix::atomic, c.dataset.n_test));
  write_jsonl(run.path("data/probe.jsonl").string(), generate_samples(c.dataset, ws.pool, "probe", SampleMix::atomic, a.n_probe));
  write_jsonl(run.path("data/multi_row.jsonl").string(),
              generate_samples(c.dataset, ws.pool, "multi_row", SampleMix::multi_row, a.n_multicell));
  write_jsonl(run.path("data/multi_col.jsonl").string(),
              generate_samples(c.dataset, ws.pool, "multi_col", SampleMix::multi_col, a.n_multicell));
  std::string vocab;
  for (int i = 0; i < ws.vocab.size(); ++i) vocab += ws.vocab.word(i) == "\n" ? std::string("\\n\n") : ws.vocab.word(i) + "\n";
  run.write("data/vocab.txt", vocab);
  nlohmann::json pool = nlohmann::json::array();
  for (const auto& cat : ws.pool.categories) pool.push_back({{"name", cat.name}, {"values", cat.values}});
  run.write_json("data/pool.json", {{"categories", pool}, {"primary_keys", ws.pool.primary_key_names}, {"keys", ws.pool.key_values}});
}

inline void stage_train(Run& run, std::ostream* log = nullptr) {
  const auto& c = run.config();
  const auto& ws = run.workspace();
  const auto train_samples = run.samples("train");
  const auto test_samples = run.samples("test");
  std::vector<TrainExample> data;
  data.reserve(train_samples.size());
  for (const auto& s : train_samples) {
    auto ex = training_example(ws, s, c.train);
    if (static_cast<int>(ex.tokens.size()) > c.model.max_seq_len)
      throw ConfigError("model.max_seq_len: training sequence of " + std::to_string(ex.tokens.size()) +
                        " tokens does not fit; raise it or lower dataset.followup_queries");
    data.push_back(std::move(ex));
  }
  const auto heldout = prompts_for(ws, test_samples);
  std::vector<PromptInstance> probe;
  for (std::size_t i = 0; i < std::min<std::size_t>(train_samples.size(), 200); ++i)
    if (train_samples[i].query.kind == QueryKind::atomic) probe.push_back(ws.prompt(train_samples[i]));

  ModelConfig mc = c.model;
  mc.vocab_size = ws.vocab.size();
  auto model = init_model<float>(mc, c.seed);
  std::string csv = "step,loss,heldout_em,train_em,lr\n";
  const auto result = train(model, data, heldout, c.train, [&](const MetricPoint& p) {
    csv += std::to_string(p.step) + "," + fmt_num(p.loss, 6) + "," + fmt_num(p.heldout_em) + "," + fmt_num(p.train_em) +
           "," + fmt_num(p.lr, 8) + "\n";
    if (log)
      *log << "step " << p.step << " loss " << fmt_num(p.loss) << " heldout_em " << fmt_num(p.heldout_em)
           << " elapsed " << fmt_num(p.elapsed_s, 1) << "s" << std::endl;
  }, probe);
  save_model(run.path("model/model.tbls").string(), model, {{"config_hash", run.config_hash()}});
  run.write("model/train_log.csv", csv);
  std::vector<double> xs, ys;
  for (const auto& m : result.metrics) {
    xs.push_back(m.step);
    ys.push_back(m.heldout_em);
  }
  run.write("model/train_curve.svg",
            svg::line_plot({{"held-out EM", xs, ys, "#d62728", "dot"}}, "Training", "step", "exact match"));
  run.write_json("model/train_summary.json", {{"steps_done", result.steps_done},
                                              {"final_heldout_em", result.final_heldout_em},
                                              {"stopped_on_budget", result.stopped_on_budget},
                                              {"parameters", mc.parameter_count()},
                                              {"vocab_size", mc.vocab_size}});
}

inline void stage_eval(Run& run) {
  const auto& c = run.config();
  const auto& ws = run.workspace();
  const auto model = run.model();
  const auto test = run.samples("test");
  const auto prompts = prompts_for(ws, test);
  const auto b = zero_ablate_eval(model, ws, test, prompts, {}, c.threads);
  const auto mr = multicell_eval(model, ws, run.samples("multi_row"), {}, c.threads);
  const auto mcol = multicell_eval(model, ws, run.samples("multi_col"), {}, c.threads);
  run.write_json("eval/eval.json", {{"atomic_em", b.em()},
                                    {"n_atomic", b.total},
                                    {"breakdown", b.to_json()},
                                    {"multi_row_em", mr.em},
                                    {"multi_col_em", mcol.em}});
  run.write("eval/breakdown.csv", breakdown_csv_header() + breakdown_csv_row("atomic", b));
}

inline PatchOptions patch_options(const RunConfig& c) {
  PatchOptions o;
  o.direction = c.analysis.patch_direction == "noise" ? PatchDirection::noise : PatchDirection::restore;
  o.denom_eps = c.analysis.denom_eps;
  o.threads = c.threads;
  return o;
}

inline std::vector<PatchPair> patch_pairs(const Workspace& ws, const std::vector<Sample>& samples) {
  std::vector<PatchPair> out;
  for (const auto& s : samples) out.push_back(make_patch_pair(ws, s));
  return out;
}

inline void emit_matrix(const Run& run, const std::string& stem, const EffectMatrix& m, const std::string& row_axis,
                        const std::string& col_axis) {
  run.write(stem + ".csv", m.to_csv());
  run.write_json(stem + ".json", m.sidecar());
  run.write(stem + ".svg", svg::heatmap(m.mean, m.row_labels, m.col_labels, m.title, row_axis, col_axis));
}

inline void stage_patch_map(Run& run) {
  const auto& c = run.config();
  const auto& ws = run.workspace();
  const auto model = run.model();
  const auto test = run.samples("test");
  nlohmann::json summary;
  for (auto axis : {CorruptionAxis::column, CorruptionAxis::row}) {
    const auto pairs = patch_pairs(ws, with_axis(test, axis, c.analysis.n_patch));
    auto m = run_layer_patch(model, pairs, patch_options(c));
    m.title = "Layer x region Effect (" + std::string(to_string(axis)) + " corruption)";
    const std::string stem = "patch/layer_region_" + std::string(to_string(axis));
    emit_matrix(run, stem, m, "residual layer", "region");
    std::vector<double> r10;
    for (Eigen::Index l = 0; l < m.mean.rows(); ++l) r10.push_back(m.mean(l, 9));
    summary[std::string(to_string(axis))] = {{"region10_by_layer", r10}, {"included", m.included}, {"excluded", m.excluded}};
  }
  run.write_json("patch/summary.json", summary);
}

inline void stage1(Run& run) {
  const auto& c = run.config();
  const auto& a = c.analysis;
  const auto& ws = run.workspace();
  const auto model = run.model();
  const auto probe = run.samples("probe");
  const auto probe_prompts = prompts_for(ws, probe);

  const auto sim = header_similarity_accuracy(model, probe_prompts, c.threads);
  run.write("stage1/similarity.csv", sim.to_csv());
  std::vector<double> xs;
  for (std::size_t l = 0; l < sim.row.size(); ++l) xs.push_back(static_cast<double>(l));
  run.write("stage1/similarity.svg", svg::line_plot({{"row", xs, sim.row, "#1f77b4", "dot"}, {"column", xs, sim.column, "#d62728", "dot"}},
                                                    "Header similarity accuracy", "residual layer", "top-1 accuracy"));

  const auto test = head_of(run.samples("test"), a.n_ablation);
  const auto test_prompts = prompts_for(ws, test);
  const auto base = zero_ablate_eval(model, ws, test, test_prompts, {}, c.threads);
  nlohmann::json abl{{"baseline", base.to_json()}, {"baseline_em", base.em()}};
  std::string csv = breakdown_csv_header() + breakdown_csv_row("baseline", base);
  nlohmann::json flow = nlohmann::json::object();
  for (auto axis : {Axis::row, Axis::column}) {
    const std::string an(to_string(axis));
    const auto scores = alignment_heads(model, probe_prompts, axis, a.alignment_top_k, c.threads);
    run.write("stage1/" + an + "_alignment_scores.csv", scores.to_csv());
    run.write("stage1/" + an + "_alignment_scores.svg",
              svg::heatmap(scores.score, index_labels(c.model.n_layers), index_labels(c.model.n_heads, 0, "h"),
                           "Alignment Score (" + an + ")", "layer", "head"));
    const auto targeted = zero_ablate_eval(model, ws, test, test_prompts, scores.selected, c.threads);
    csv += breakdown_csv_row(an + "_heads", targeted);
    nlohmann::json randoms = nlohmann::json::array();
    double rnd_em = 0.0, rnd_wrong_row = 0.0;
    for (int s = 0; s < a.random_seeds; ++s) {
      const auto rh = random_heads(c.model, static_cast<int>(scores.selected.size()), scores.selected, c.seed + 1000 + s);
      const auto rb = zero_ablate_eval(model, ws, test, test_prompts, rh, c.threads);
      csv += breakdown_csv_row(an + "_random_" + std::to_string(s), rb);
      randoms.push_back({{"heads", to_json(rh)}, {"breakdown", rb.to_json()}, {"em", rb.em()}});
      rnd_em += rb.em() / a.random_seeds;
      rnd_wrong_row += rb.share(ErrorCategory::wrong_row) / a.random_seeds;
    }
    abl[an] = {{"heads", to_json(scores.selected)},
               {"n_samples", scores.n_samples},
               {"targeted", targeted.to_json()},
               {"targeted_em", targeted.em()},
               {"targeted_wrong_row", targeted.share(ErrorCategory::wrong_row)},
               {"random", randoms},
               {"random_em_mean", rnd_em},
               {"random_wrong_row_mean", rnd_wrong_row}};
    flow[an + "_heads"] = targeted.to_json();
  }
  flow["baseline"] = base.to_json();
  run.write_json("stage1/ablation.json", abl);
  run.write("stage1/ablation.csv", csv);
  run.write_json("stage1/error_flow.json", flow);
}

inline int best_layer(const std::vector<double>& r2, int lo, int hi) {
  int best = lo;
  for (int l = lo; l <= hi; ++l)
    if (r2[static_cast<std::size_t>(l)] > r2[static_cast<std::size_t>(best)]) best = l;
  return best;
}

inline void stage2(Run& run) {
  const auto& c = run.config();
  const auto& a = c.analysis;
  const auto& ws = run.workspace();
  const auto model = run.model();
  const int L = c.model.n_layers;
  const auto probe = run.samples("probe");
  const auto probe_prompts = prompts_for(ws, probe);

  // Residual probes.
  const auto sweep = probe_sweep(model, probe_prompts, a.probe_lambda, c.seed, c.threads);
  run.write("stage2/probe_r2.csv", sweep.to_csv());
  write_tensor_file(run.path("stage2/probes.tbls").string(), probes_to_tensor_file(sweep));
  std::vector<double> xs;
  for (int l = 0; l <= L; ++l) xs.push_back(l);
  run.write("stage2/probe_r2.svg",
            svg::line_plot({{"column / delimiter", xs, sweep.get(Axis::column, ProbeClass::delimiter).r2(), "#d62728", "star"},
                            {"column / cell", xs, sweep.get(Axis::column, ProbeClass::cell).r2(), "#ff9896", "dot"},
                            {"row / delimiter", xs, sweep.get(Axis::row, ProbeClass::delimiter).r2(), "#1f77b4", "star"},
                            {"row / cell", xs, sweep.get(Axis::row, ProbeClass::cell).r2(), "#aec7e8", "dot"}},
                           "Probe R^2", "residual layer", "held-out R^2"));

  // Prediction traces on unseen prompts.
  const int col_layer = best_layer(sweep.get(Axis::column, ProbeClass::cell).r2(), 1, L);
  const int row_layer = best_layer(sweep.get(Axis::row, ProbeClass::cell).r2(), 1, L);
  const auto trace_samples = head_of(run.samples("test"), std::min(a.n_ablation, 100));
  CapturePlan plan;
  plan.add(HookPoint::resid(col_layer));
  plan.add(HookPoint::resid(row_layer));
  std::vector<PredictionTrace> col_tr, row_tr;
  std::string trace_csv = "sample,position,r_idx,c_idx,col_pred,row_pred\n";
  double step_sum = 0.0;
  int step_n = 0;
  for (std::size_t i = 0; i < trace_samples.size(); ++i) {
    const auto p = ws.prompt(trace_samples[i]);
    ForwardOptions fo;
    fo.capture = &plan;
    const auto res = forward(model, p.token_ids, fo);
    col_tr.push_back(predict_trace(sweep.get(Axis::column, ProbeClass::cell).probes[static_cast<std::size_t>(col_layer)], p,
                                   res.trace.get(HookPoint::resid(col_layer))));
    row_tr.push_back(predict_trace(sweep.get(Axis::row, ProbeClass::cell).probes[static_cast<std::size_t>(row_layer)], p,
                                   res.trace.get(HookPoint::resid(row_layer))));
    if (auto st = step_score(row_tr.back())) {
      step_sum += *st;
      ++step_n;
    }
    if (i < 5)
      for (std::size_t k = 0; k < col_tr.back().position.size(); ++k)
        trace_csv += std::to_string(i) + "," + std::to_string(col_tr.back().position[k]) + "," +
                     std::to_string(col_tr.back().r_idx[k]) + "," + std::to_string(col_tr.back().c_idx[k]) + "," +
                     fmt_num(col_tr.back().predicted[k]) + "," + fmt_num(row_tr.back().predicted[k]) + "\n";
  }
  run.write("stage2/traces.csv", trace_csv);
  if (!col_tr.empty()) {
    std::vector<double> tx, ty, gt;
    for (std::size_t k = 0; k < col_tr[0].position.size(); ++k) {
      tx.push_back(static_cast<double>(k));
      ty.push_back(col_tr[0].predicted[k]);
      gt.push_back(col_tr[0].c_idx[k]);
    }
    run.write("stage2/trace_column.svg", svg::line_plot({{"predicted", tx, ty, "#d62728", "dot"}, {"true", tx, gt, "#7f7f7f", "none"}},
                                                        "Column-index trace (layer " + std::to_string(col_layer) + ")",
                                                        "table token", "column index"));
  }
  const auto perm = sawtooth_permutation_test(col_tr, a.n_permutations, c.seed);

  // Coordinate heads from RoPE interaction scores.
  const auto inter = rope_interaction(model, probe_prompts, a.coord_top_k, c.threads);
  std::string icsv = "layer,head,contrast\n";
  for (const auto& m : inter.heads)
    icsv += std::to_string(m.layer) + "," + std::to_string(m.head) + "," + fmt_num(m.contrast, 6) + "\n";
  run.write("stage2/interaction_contrast.csv", icsv);
  for (std::size_t i = 0; i < std::min<std::size_t>(inter.selected.size(), 4); ++i) {
    const auto& h = inter.selected[i];
    const auto& m = inter.heads[static_cast<std::size_t>(h.layer * c.model.n_heads + h.head)];
    const std::string stem = "stage2/interaction_l" + std::to_string(h.layer) + "h" + std::to_string(h.head);
    run.write(stem + ".csv", m.to_csv());
    const auto labels = index_labels(static_cast<int>(m.S.rows()), m.first_index);
    run.write(stem + ".svg", svg::heatmap(m.S, labels, labels, "S_{j,l} layer " + std::to_string(h.layer) + " head " +
                                                                   std::to_string(h.head), "query column j", "table column l"));
  }

  // Head-output probes and delimiter-head patching.
  const auto rank = head_probe_rank(model, probe_prompts, a.probe_head_top_k, a.probe_lambda, c.seed, c.threads);
  std::string rcsv = "layer,head,row_cell,row_delimiter,column_cell,column_delimiter\n";
  for (int l = 0; l < L; ++l)
    for (int h = 0; h < c.model.n_heads; ++h)
      rcsv += std::to_string(l) + "," + std::to_string(h) + "," + fmt_num(rank.scores(Axis::row, ProbeClass::cell)(l, h)) + "," +
              fmt_num(rank.scores(Axis::row, ProbeClass::delimiter)(l, h)) + "," +
              fmt_num(rank.scores(Axis::column, ProbeClass::cell)(l, h)) + "," +
              fmt_num(rank.scores(Axis::column, ProbeClass::delimiter)(l, h)) + "\n";
  run.write("stage2/head_probe_r2.csv", rcsv);
  nlohmann::json dpatch;
  Rng rng = make_stream(c.seed, 0x5a4b);
  for (auto axis : {Axis::column, Axis::row}) {
    std::vector<SwapPrompts> swaps;
    for (const auto& s : probe) {
      if (axis == Axis::column && s.table.cols() < 3) continue;
      swaps.push_back(swap_prompts(ws, make_swap(s, axis, rng)));
    }
    for (auto cls : {ProbeClass::delimiter, ProbeClass::cell}) {
      const auto& heads = rank.selected(axis, cls);
      const auto m = delimiter_head_patch(model, swaps, heads, patch_options(c));
      dpatch[std::string(to_string(axis))][std::string(to_string(cls))] = {
          {"effect", m.mean(0, 0)}, {"std", m.stddev(0, 0)}, {"heads", to_json(heads)}, {"included", m.included}, {"excluded", m.excluded}};
    }
  }

  nlohmann::json sel = nlohmann::json::object();
  for (auto axis : {Axis::row, Axis::column})
    for (auto cls : {ProbeClass::cell, ProbeClass::delimiter})
      sel[std::string(to_string(axis)) + "_" + std::string(to_string(cls))] = to_json(rank.selected(axis, cls));
  auto curve = [&](Axis ax, ProbeClass cl) { return sweep.get(ax, cl).r2(); };
  run.write_json("stage2/summary.json",
                 {{"r2",
                   {{"row_cell", curve(Axis::row, ProbeClass::cell)},
                    {"row_delimiter", curve(Axis::row, ProbeClass::delimiter)},
                    {"column_cell", curve(Axis::column, ProbeClass::cell)},
                    {"column_delimiter", curve(Axis::column, ProbeClass::delimiter)}}},
                  {"trace_layers", {{"column", col_layer}, {"row", row_layer}}},
                  {"sawtooth", {{"observed", perm.observed}, {"null_mean", perm.null_mean}, {"p_value", perm.p_value},
                                {"n_permutations", perm.n_permutations}}},
                  {"step_score", step_n ? step_sum / step_n : 0.0},
                  {"coordinate_heads", to_json(inter.selected)},
                  {"interaction_index_range", {inter.first_index, inter.last_index}},
                  {"probe_heads", sel},
                  {"delimiter_patch", dpatch}});
}

inline void stage3(Run& run) {
  const auto& c = run.config();
  const auto& a = c.analysis;
  const auto& ws = run.workspace();
  const auto model = run.model();
  const auto test = run.samples("test");
  const auto col = with_axis(test, CorruptionAxis::column, a.n_patch);
  const auto pairs = patch_pairs(ws, col);
  auto m = run_head_patch_last(model, pairs, patch_options(c));
  emit_matrix(run, "stage3/head_patch_last", m, "layer", "head");
  std::vector<PromptInstance> clean;
  for (const auto& p : pairs) clean.push_back(p.clean);
  const auto movers = find_mover_heads(model, clean, m, a.mover_attn_threshold, a.mover_sample_fraction, c.threads);
  nlohmann::json out = movers.to_json();
  std::vector<HeadId> ids;
  for (const auto& h : movers.heads) ids.push_back({h.layer, h.head});
  const auto abl = head_of(test, a.n_ablation);
  const auto abl_prompts = prompts_for(ws, abl);
  const auto base = zero_ablate_eval(model, ws, abl, abl_prompts, {}, c.threads);
  out["baseline_em"] = base.em();
  if (!ids.empty()) {
    out["ablated_em"] = zero_ablate_eval(model, ws, abl, abl_prompts, ids, c.threads).em();
    if (static_cast<int>(ids.size()) < c.model.n_layers * c.model.n_heads) {
      const auto rh = random_heads(c.model, static_cast<int>(ids.size()), ids, c.seed + 3000);
      out["random_ablated_em"] = zero_ablate_eval(model, ws, abl, abl_prompts, rh, c.threads).em();
    }
  }
  const auto all_heads = run_head_set_patch_last(model, pairs, [&] {
    std::vector<HeadId> v;
    for (int l = 0; l < c.model.n_layers; ++l)
      for (int h = 0; h < c.model.n_heads; ++h) v.push_back({l, h});
    return v;
  }());
  out["all_heads_effect"] = all_heads.mean(0, 0);
  run.write_json("stage3/movers.json", out);
}

inline std::vector<int> steer_window(const RunConfig& c) {
  return c.analysis.steer_window.empty() ? default_steer_window(c.model.n_layers) : c.analysis.steer_window;
}

inline void stage_steer(Run& run) {
  const auto& c = run.config();
  const auto& a = c.analysis;
  const auto& ws = run.workspace();
  const auto model = run.model();
  const auto extraction = prompts_for(ws, run.samples("probe"));
  auto unit = extract_shift_vector(model, extraction, 1, steer_window(c), c.threads);
  if (a.steer_global_average) unit = unit.global_average();
  TensorFile tf;
  tf.meta = {{"kind", "shift_vector"}, {"k", 1}, {"layers", unit.layers}, {"n_samples", unit.n_samples}, {"n_pairs", unit.n_pairs},
             {"positions", "t-1,t"}, {"global_average", a.steer_global_average}};
  add_to_tensor_file(tf, unit, "v_unit");
  write_tensor_file(run.path("steer/v_unit.tbls").string(), tf);
  const auto eval = head_of(run.samples("test"), a.n_steer);
  std::string csv = "k,mean_effect,included,excluded,raised_fraction\n";
  nlohmann::json rows = nlohmann::json::array();
  std::vector<double> xs, ys;
  double plus_one_raised = 0.0;
  for (int k : a.steer_ks) {
    const auto s = steering_sweep(model, ws, eval, unit, k, static_cast<double>(k), a.steer_alpha, c.threads);
    csv += std::to_string(k) + "," + fmt_num(s.mean_effect) + "," + std::to_string(s.included) + "," +
           std::to_string(s.excluded) + "," + fmt_num(s.raised_fraction()) + "\n";
    rows.push_back({{"k", k}, {"mean_effect", s.mean_effect}, {"included", s.included}, {"excluded", s.excluded},
                    {"raised_fraction", s.raised_fraction()}, {"in_range", s.in_range}});
    if (k != 0) {
      xs.push_back(k);
      ys.push_back(s.mean_effect);
    }
    if (k == 1) plus_one_raised = s.raised_fraction();
  }
  run.write("steer/steering.csv", csv);
  run.write("steer/steering.svg", svg::line_plot({{"k * alpha * v_unit", xs, ys, "#2ca02c", "dot"}}, "Steering Effect",
                                                 "multiplier k", "Effect Score"));
  run.write_json("steer/summary.json", {{"window", unit.layers}, {"alpha", a.steer_alpha}, {"v_unit_norm", unit.norm()},
                                        {"rows", rows}, {"plus_one_raised_fraction", plus_one_raised}});
}

inline void stage_compose(Run& run) {
  const auto& c = run.config();
  const auto& a = c.analysis;
  const auto& ws = run.workspace();
  const auto model = run.model();
  const auto extraction = prompts_for(ws, run.samples("probe"));
  const auto eval = head_of(run.samples("test"), a.n_steer);
  CompositionOptions opt;
  opt.ks = a.compose_ks;
  opt.max_component = a.compose_max_component;
  opt.alpha = a.steer_alpha;
  opt.global_average = a.steer_global_average;
  opt.threads = c.threads;
  // Each v_k is applied once (multiplier 1), so the coefficient is alpha as in the unit case.
  const auto res = composition_experiment(model, ws, extraction, eval, steer_window(c), opt);
  run.write("compose/composition.csv", res.to_csv());
  svg::Series stars{"baseline v_k", {}, {}, "#d62728", "star"}, dots{"composite v_a + v_b", {}, {}, "#1f77b4", "dot"};
  for (const auto& r : res.rows) {
    auto& s = r.composite ? dots : stars;
    s.x.push_back(r.k);
    s.y.push_back(r.effect);
  }
  run.write("compose/composition.svg", svg::scatter_plot({stars, dots}, "Additive composition", "target shift k", "Effect Score"));
  run.write_json("compose/summary.json",
                 {{"ks", res.ks}, {"baseline", res.baseline}, {"composite_mean", res.composite_mean},
                  {"rank_correlation", res.rank_correlation}});
}

inline void stage_noise(Run& run) {
  const auto& c = run.config();
  const auto& ws = run.workspace();
  const auto model = run.model();
  const auto test = head_of(run.samples("test"), c.analysis.n_ablation);
  const auto res = noise_eval(model, ws, test, default_noise_conditions(c.analysis.noise_amount), c.threads);
  run.write("noise/noise.csv", res.to_csv());
  nlohmann::json j{{"n", res.n}, {"amount", c.analysis.noise_amount}};
  for (std::size_t i = 0; i < res.names.size(); ++i) j["em"][res.names[i]] = res.em[i];
  run.write_json("noise/summary.json", j);
}

inline void stage_multicell(Run& run) {
  const auto& c = run.config();
  const auto& a = c.analysis;
  const auto& ws = run.workspace();
  const auto model = run.model();
  const auto stage1_abl = run.read_json("stage1/ablation.json", "stage1");
  const auto stage2_sum = run.read_json("stage2/summary.json", "stage2");
  const auto row_heads = heads_from_json(stage1_abl.at("row").at("heads"));
  const auto coord_heads = heads_from_json(stage2_sum.at("coordinate_heads"));
  nlohmann::json out;
  std::string csv = breakdown_csv_header();
  for (const std::string split : {"multi_row", "multi_col"}) {
    const auto samples = run.samples(split);
    const auto base = multicell_eval(model, ws, samples, {}, c.threads);
    const auto abl = multicell_ablation(model, ws, samples, row_heads, c.threads);
    csv += breakdown_csv_row(split + "_baseline", base.breakdown) + breakdown_csv_row(split + "_row_heads", abl.breakdown);
    nlohmann::json randoms = nlohmann::json::array();
    for (int s = 0; s < a.random_seeds; ++s) {
      const auto rh = random_heads(c.model, static_cast<int>(row_heads.size()), row_heads, c.seed + 1000 + s);
      const auto rr = multicell_eval(model, ws, samples, rh, c.threads);
      csv += breakdown_csv_row(split + "_random_" + std::to_string(s), rr.breakdown);
      randoms.push_back(rr.to_json());
    }
    out[split] = {{"baseline", base.to_json()}, {"row_head_ablation", abl.to_json()}, {"random", randoms}};
  }
  run.write("multicell/breakdown.csv", csv);
  const auto mc_prompts = prompts_for(ws, run.samples("multi_col"));
  nlohmann::json hm = nlohmann::json::array();
  for (const auto& h : multicell_rope_heatmap(model, mc_prompts, coord_heads, c.threads)) {
    const auto labels = index_labels(static_cast<int>(h.S.rows()), h.first_index);
    const std::string stem = "multicell/interaction_card" + std::to_string(h.cardinality);
    run.write(stem + ".svg", svg::heatmap(h.S, labels, labels,
                                          "S_{j,l} over coordinate heads, " + std::to_string(h.cardinality) + " queried columns",
                                          "query column j", "table column l"));
    hm.push_back({{"cardinality", h.cardinality}, {"n_prompts", h.n_prompts}, {"row_argmax", row_argmax(h.S)}});
  }
  out["interaction"] = hm;
  out["row_heads"] = to_json(row_heads);
  out["coordinate_heads"] = to_json(coord_heads);
  run.write_json("multicell/summary.json", out);
}

// ---------------------------------------------------------------------------
// Report

inline std::string csv_to_markdown(const std::string& csv) {
  std::istringstream in(csv);
  std::string line, out;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::string row = "|";
    std::size_t cols = 0;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) {
      row += " " + cell + " |";
      ++cols;
    }
    out += row + "\n";
    if (first) {
      out += "|";
      for (std::size_t i = 0; i < cols; ++i) out += " --- |";
      out += "\n";
      first = false;
    }
  }
  return out;
}

inline void stage_report(Run& run) {
  static const std::vector<std::pair<std::string, std::string>> sections{
      {"patch", "Layer x region patching"}, {"stage1", "Semantic binding"},  {"stage2", "Coordinate encoding"},
      {"stage3", "Information movers"},     {"steer", "Steering"},          {"compose", "Composition"},
      {"noise", "Noise injection"},         {"multicell", "Multi-cell queries"}};
  bool any = false;
  for (const auto& [dir, title] : sections) any = any || run.exists(dir);
  if (!any) throw PrerequisiteError("no analysis outputs in " + run.dir().string() + "; run an analysis subcommand (e.g. `tablelab all`) first");
  std::ostringstream md;
  md << "# tablelab report\n\nConfig hash `" << run.config_hash() << "`.\n\n";
  auto embed_dir = [&](const std::string& dir) {
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(run.path(dir)))
      if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      const auto rel = std::filesystem::relative(f, run.dir()).generic_string();
      std::ifstream in(f);
      std::stringstream ss;
      ss << in.rdbuf();
      if (f.extension() == ".svg") md << "![" << rel << "](" << rel << ")\n\n";
      else if (f.extension() == ".csv" && ss.str().size() < 8000) md << "`" << rel << "`\n\n" << csv_to_markdown(ss.str()) << "\n";
      else if (f.extension() == ".json" && ss.str().size() < 8000) md << "`" << rel << "`\n\n```json\n" << ss.str() << "```\n\n";
    }
  };
  if (run.exists("eval")) {
    md << "## Evaluation\n\n";
    embed_dir("eval");
  }
  if (run.exists("model")) {
    md << "## Training\n\n";
    embed_dir("model");
  }
  for (const auto& [dir, title] : sections)
    if (run.exists(dir)) {
      md << "## " << title << "\n\n";
      embed_dir(dir);
    }
  run.write("report.md", md.str());
}

// ---------------------------------------------------------------------------
// Dispatch

struct StageDef {
  std::string name;
  std::function<void(Run&)> fn;
};

inline std::vector<StageDef> analysis_stages() {
  return {{"eval", stage_eval},     {"patch-map", stage_patch_map}, {"stage1", stage1},   {"stage2", stage2},
          {"stage3", stage3},       {"steer", stage_steer},         {"compose", stage_compose},
          {"noise", stage_noise},   {"multicell", stage_multicell}, {"report", stage_report}};
}

inline void run_stage(Run& run, const std::string& name, const std::function<void(Run&)>& fn) {
  const auto t0 = std::chrono::steady_clock::now();
  fn(run);
  run.write_json("config.json", run.config().to_json());
  run.update_manifest(name, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
}

inline void run_all(Run& run, std::ostream* log = nullptr) {
  auto logged = [&](const std::string& name, const std::function<void(Run&)>& fn) {
    if (log) *log << "[" << name << "]" << std::endl;
    run_stage(run, name, fn);
  };
  logged("gen", stage_gen);
  logged("train", [&](Run& r) { stage_train(r, log); });
  for (const auto& s : analysis_stages()) logged(s.name, s.fn);
}

}  // namespace tablelab
