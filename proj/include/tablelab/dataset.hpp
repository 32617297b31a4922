#pragma once

// Corpus configuration, per-sample records, the JSONL dataset schema and the
// workspace that turns samples into prompts.
//
// JSONL record (one per line):
//   {"seed": u64, "index": i64, "split": "train"|"test"|..., "format": "markdown"|"csv"|"html",
//    "table": {"col_headers": [...], "row_headers": [...], "cells": [[...], ...]},
//    "query": {"kind": "atomic"|"multi_row"|"multi_col", "row_targets": [i...], "col_targets": [j...],
//              "template_id": k},
//    "corruption": {"axis": "row"|"column"|"both", "corrupt_query": {...}, "gold": str, "foil": str}?,
//    "noise": {"kind": ..., "placement": ..., "amount": n}?,
//    "layout": {"pad": [[r, c, n], ...], "blank": [[r, c], ...]}?}

#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tablelab/prompt.hpp"

namespace tablelab {

struct DatasetConfig {
  std::uint64_t seed = 7;
  int n_train = 20000;
  int n_test = 500;
  int n_categories = 83;
  int values_per_category = 24;
  int n_key_values = 64;
  int min_rows = 4, max_rows = 8;
  int min_cols = 4, max_cols = 8;
  bool paper_dims = false;
  std::string format = "markdown";
  double multicell_fraction = 0.2;
  int max_subset = 3;
  bool demo = true;
  int demo_rows = 3;
  int demo_cols = 3;
  bool markdown_separator = true;
  // Training-only layout variation: probability that a table gets ragged
  // cells, and per-cell chances of filler padding / a blank value.
  double layout_prob = 0.0;
  double pad_cell_prob = 0.3;
  int max_pad = 2;
  double blank_cell_prob = 0.15;
  // Extra question/answer pairs appended to each training sequence.
  int followup_queries = 0;

  DimsRange dims() const { return paper_dims ? DimsRange::paper() : DimsRange{min_rows, max_rows, min_cols, max_cols}; }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DatasetConfig, seed, n_train, n_test, n_categories,
                                                values_per_category, n_key_values, min_rows, max_rows, min_cols,
                                                max_cols, paper_dims, format, multicell_fraction, max_subset, demo,
                                                demo_rows, demo_cols, markdown_separator, layout_prob, pad_cell_prob,
                                                max_pad, blank_cell_prob, followup_queries)

struct Sample {
  std::uint64_t seed = 0;
  std::int64_t index = 0;
  std::string split = "train";
  Format format = Format::markdown;
  Table table;
  QuerySpec query;
  std::optional<CorruptedPair> corruption;
  std::optional<NoiseSpec> noise;
  std::optional<CellLayout> layout;
};

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json to_json(const Table& t) {
  return {{"col_headers", t.col_headers}, {"row_headers", t.row_headers}, {"cells", t.cells}};
}
inline Table table_from_json(const nlohmann::json& j) {
  Table t;
  j.at("col_headers").get_to(t.col_headers);
  j.at("row_headers").get_to(t.row_headers);
  j.at("cells").get_to(t.cells);
  return t;
}
inline nlohmann::json to_json(const QuerySpec& q) {
  return {{"kind", std::string(to_string(q.kind))},
          {"row_targets", q.row_targets},
          {"col_targets", q.col_targets},
          {"template_id", q.template_id}};
}
inline QuerySpec query_from_json(const nlohmann::json& j) {
  QuerySpec q;
  q.kind = query_kind_from_string(j.at("kind").get<std::string>());
  j.at("row_targets").get_to(q.row_targets);
  j.at("col_targets").get_to(q.col_targets);
  q.template_id = j.at("template_id").get<int>();
  return q;
}

inline nlohmann::json to_json(const Sample& s) {
  nlohmann::json j{{"seed", s.seed},
                   {"index", s.index},
                   {"split", s.split},
                   {"format", std::string(to_string(s.format))},
                   {"table", to_json(s.table)},
                   {"query", to_json(s.query)}};
  if (s.corruption)
    j["corruption"] = {{"axis", std::string(to_string(s.corruption->axis))},
                       {"corrupt_query", to_json(s.corruption->corrupt_query)},
                       {"gold", s.corruption->gold},
                       {"foil", s.corruption->foil}};
  if (s.noise)
    j["noise"] = {{"kind", std::string(to_string(s.noise->kind))},
                  {"placement", std::string(to_string(s.noise->placement))},
                  {"amount", s.noise->amount}};
  if (s.layout) {
    nlohmann::json pad = nlohmann::json::array(), blank = nlohmann::json::array();
    for (std::size_t r = 0; r < s.layout->pad.size(); ++r)
      for (std::size_t c = 0; c < s.layout->pad[r].size(); ++c) {
        if (s.layout->pad[r][c] > 0) pad.push_back({r, c, s.layout->pad[r][c]});
        if (s.layout->blank_at(static_cast<int>(r), static_cast<int>(c))) blank.push_back({r, c});
      }
    j["layout"] = {{"pad", pad}, {"blank", blank}};
  }
  return j;
}

inline Sample sample_from_json(const nlohmann::json& j) {
  Sample s;
  s.seed = j.at("seed").get<std::uint64_t>();
  s.index = j.at("index").get<std::int64_t>();
  s.split = j.at("split").get<std::string>();
  s.format = format_from_string(j.at("format").get<std::string>());
  s.table = table_from_json(j.at("table"));
  s.query = query_from_json(j.at("query"));
  if (j.contains("corruption")) {
    const auto& c = j.at("corruption");
    CorruptedPair p;
    p.clean_table = s.table;
    p.clean_query = s.query;
    p.corrupt_query = query_from_json(c.at("corrupt_query"));
    p.axis = corruption_axis_from_string(c.at("axis").get<std::string>());
    p.gold = c.at("gold").get<std::string>();
    p.foil = c.at("foil").get<std::string>();
    s.corruption = std::move(p);
  }
  if (j.contains("noise")) {
    const auto& n = j.at("noise");
    s.noise = NoiseSpec{noise_kind_from_string(n.at("kind").get<std::string>()),
                        noise_placement_from_string(n.at("placement").get<std::string>()), n.at("amount").get<int>()};
  }
  if (j.contains("layout")) {
    CellLayout l;
    l.pad.assign(s.table.rows(), std::vector<int>(s.table.cols(), 0));
    l.blank.assign(s.table.rows(), std::vector<char>(s.table.cols(), 0));
    for (const auto& e : j.at("layout").at("pad")) l.pad.at(e.at(0).get<int>()).at(e.at(1).get<int>()) = e.at(2).get<int>();
    for (const auto& e : j.at("layout").at("blank")) l.blank.at(e.at(0).get<int>()).at(e.at(1).get<int>()) = 1;
    s.layout = std::move(l);
  }
  return s;
}

inline void write_jsonl(const std::string& path, const std::vector<Sample>& samples) {
  if (const auto dir = std::filesystem::path(path).parent_path(); !dir.empty()) std::filesystem::create_directories(dir);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  for (const auto& s : samples) os << to_json(s).dump() << '\n';
  if (!os) throw std::runtime_error("write failed: " + path);
}

inline std::vector<Sample> read_jsonl(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path);
  std::vector<Sample> out;
  std::string line;
  while (std::getline(is, line))
    if (!line.empty()) out.push_back(sample_from_json(nlohmann::json::parse(line)));
  return out;
}

// ---------------------------------------------------------------------------
// Generation

enum class SampleMix { training, atomic, multi_row, multi_col };

// Stream offsets keep every split's RNG streams disjoint.
inline std::uint64_t split_stream_base(std::string_view split) {
  if (split == "train") return 0;
  if (split == "test") return 1ULL << 40;
  if (split == "multi_row") return 2ULL << 40;
  if (split == "multi_col") return 3ULL << 40;
  if (split == "probe") return 4ULL << 40;
  return 5ULL << 40;
}

inline CellLayout random_layout(const DatasetConfig& cfg, const Table& t, const QuerySpec& q, Rng& rng) {
  CellLayout l;
  l.pad.assign(t.rows(), std::vector<int>(t.cols(), 0));
  l.blank.assign(t.rows(), std::vector<char>(t.cols(), 0));
  const auto answers = q.answer_cells();
  auto is_answer = [&](int r, int c) {
    return std::find(answers.begin(), answers.end(), std::pair<int, int>{r, c}) != answers.end();
  };
  for (int r = 0; r < t.rows(); ++r)
    for (int c = 1; c < t.cols(); ++c) {
      if (uniform_real(rng) < cfg.pad_cell_prob) l.pad[r][c] = uniform_int(rng, 1, std::max(1, cfg.max_pad));
      if (!is_answer(r, c) && uniform_real(rng) < cfg.blank_cell_prob) l.blank[r][c] = 1;
    }
  return l;
}

inline Sample generate_sample(const DatasetConfig& cfg, const EntityPool& pool, std::string_view split, SampleMix mix,
                              std::int64_t index) {
  Rng rng = make_stream(cfg.seed, split_stream_base(split) + static_cast<std::uint64_t>(index));
  Sample s;
  s.seed = cfg.seed;
  s.index = index;
  s.split = std::string(split);
  s.format = format_from_string(cfg.format);
  s.table = generate_table(pool, cfg.dims(), rng);

  QueryKind kind = QueryKind::atomic;
  if (mix == SampleMix::multi_row) kind = QueryKind::multi_row;
  if (mix == SampleMix::multi_col) kind = QueryKind::multi_col;
  if (mix == SampleMix::training && uniform_real(rng) < cfg.multicell_fraction)
    kind = uniform_real(rng) < 0.5 ? QueryKind::multi_row : QueryKind::multi_col;
  int subset = 1;
  if (kind != QueryKind::atomic) {
    const int cap = kind == QueryKind::multi_row ? s.table.rows() : s.table.cols() - 1;
    subset = uniform_int(rng, 2, std::max(2, std::min(cfg.max_subset, cap)));
  }
  s.query = make_query(s.table, kind, subset, rng);
  if (kind == QueryKind::atomic && mix != SampleMix::training) {
    const auto axis = index % 2 == 0 ? CorruptionAxis::column : CorruptionAxis::row;
    s.corruption = make_corruption(s.table, s.query, axis, rng);
  }
  if (mix == SampleMix::training && cfg.layout_prob > 0 && uniform_real(rng) < cfg.layout_prob)
    s.layout = random_layout(cfg, s.table, s.query, rng);
  return s;
}

inline std::vector<Sample> generate_samples(const DatasetConfig& cfg, const EntityPool& pool, std::string_view split,
                                            SampleMix mix, int n, std::int64_t first_index = 0) {
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) out.push_back(generate_sample(cfg, pool, split, mix, first_index + i));
  return out;
}

// Pool, vocabulary and demonstration derived from a dataset config.
struct Workspace {
  DatasetConfig cfg;
  EntityPool pool;
  Vocab vocab;
  std::optional<Demo> demo;
  int max_seq_len = 0;

  explicit Workspace(const DatasetConfig& c, int max_len = 0)
      : cfg(c),
        pool(build_entity_pool(c.seed, c.n_categories, c.values_per_category, c.n_key_values)),
        vocab(build_vocab(pool)),
        max_seq_len(max_len) {
    if (c.demo) demo = make_demo(pool, c.seed, c.demo_rows, c.demo_cols);
  }

  AssembleOptions assemble_options(Format f) const {
    AssembleOptions o;
    o.format = f;
    o.serialize.markdown_separator = cfg.markdown_separator;
    o.max_seq_len = max_seq_len;
    return o;
  }

  PromptInstance prompt(const Sample& s, bool with_corruption = false,
                        const std::optional<NoiseSpec>& noise_override = std::nullopt) const {
    auto opts = assemble_options(s.format);
    if (s.layout) opts.serialize.layout = &*s.layout;
    std::optional<NoiseDirective> nd;
    const auto& nz = noise_override ? noise_override : s.noise;
    if (nz) nd = inject_noise(s.table, s.query, *nz);
    std::optional<CorruptedPair> cp;
    if (with_corruption) {
      if (!s.corruption) throw std::invalid_argument("sample has no corruption");
      cp = s.corruption;
    }
    return assemble_prompt(vocab, demo, s.table, s.query, opts, cp, nd);
  }

  // The corrupted run: same table, counterfactual query.
  PromptInstance corrupt_prompt(const Sample& s) const {
    if (!s.corruption) throw std::invalid_argument("sample has no corruption");
    auto opts = assemble_options(s.format);
    if (s.layout) opts.serialize.layout = &*s.layout;
    return assemble_prompt(vocab, demo, s.table, s.corruption->corrupt_query, opts);
  }
};

}  // namespace tablelab
