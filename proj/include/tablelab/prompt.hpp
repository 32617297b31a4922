#pragma once

// Closed-vocabulary tokenization, table serialization (Markdown / CSV / HTML),
// prompt assembly with span bookkeeping, patching regions and per-token
// table coordinates.

#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "tablelab/tablegen.hpp"

namespace tablelab {

class Vocab {
 public:
  // Reserved ids.
  static constexpr int bos = 0;
  static constexpr int pipe = 1;
  static constexpr int comma = 2;
  static constexpr int newline = 3;
  static constexpr int dash_run = 4;
  static constexpr int tr_open = 5;
  static constexpr int tr_close = 6;
  static constexpr int td_open = 7;
  static constexpr int td_close = 8;
  static constexpr int filler_begin = 9;
  static constexpr int n_filler = 8;
  static constexpr int filler_end = filler_begin + n_filler;

  Vocab() {
    for (auto w : {"<bos>", "|", ",", "\n", "---", "<tr>", "</tr>", "<td>", "</td>"}) add(w);
    for (int i = 0; i < n_filler; ++i) add("~" + std::to_string(i + 1));
  }

  int add(const std::string& word) {
    if (word.empty()) throw std::invalid_argument("vocab: empty word");
    if (ids_.count(word)) throw std::invalid_argument("vocab: duplicate surface word '" + word + "'");
    const int id = static_cast<int>(words_.size());
    words_.push_back(word);
    ids_.emplace(word, id);
    return id;
  }

  int id(std::string_view word) const {
    auto it = ids_.find(std::string(word));
    if (it == ids_.end()) throw std::out_of_range("vocab: unknown word '" + std::string(word) + "'");
    return it->second;
  }
  bool contains(std::string_view word) const { return ids_.count(std::string(word)) > 0; }
  const std::string& word(int id) const { return words_.at(static_cast<std::size_t>(id)); }
  int size() const { return static_cast<int>(words_.size()); }
  const std::vector<std::string>& words() const { return words_; }

  static bool is_filler(int id) { return id >= filler_begin && id < filler_end; }
  static bool is_reserved(int id) { return id < filler_end; }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> ids_;
};

inline Vocab build_vocab(const EntityPool& pool) {
  Vocab v;
  for (const auto& w : scaffold_words()) v.add(w);
  for (const auto& c : pool.categories) v.add(c.name);
  for (const auto& c : pool.categories)
    for (const auto& x : c.values) v.add(x);
  for (const auto& k : pool.key_values) v.add(k);
  return v;
}

// Whitespace separates words; '\n' is always a token of its own.
inline std::vector<int> tokenize(const Vocab& vocab, std::string_view text) {
  std::vector<int> out;
  std::size_t i = 0;
  while (i < text.size()) {
    const char ch = text[i];
    if (ch == '\n') {
      out.push_back(Vocab::newline);
      ++i;
    } else if (ch == ' ' || ch == '\t' || ch == '\r') {
      ++i;
    } else {
      std::size_t j = i;
      while (j < text.size() && text[j] != ' ' && text[j] != '\n' && text[j] != '\t' && text[j] != '\r') ++j;
      out.push_back(vocab.id(text.substr(i, j - i)));
      i = j;
    }
  }
  return out;
}

inline std::string detokenize(const Vocab& vocab, std::span<const int> ids) {
  std::string s;
  bool line_start = true;
  for (int id : ids) {
    if (id == Vocab::newline) {
      s.push_back('\n');
      line_start = true;
      continue;
    }
    if (!line_start) s.push_back(' ');
    s += vocab.word(id);
    line_start = false;
  }
  return s;
}

enum class Format { markdown, csv, html };

inline std::string_view to_string(Format f) {
  switch (f) {
    case Format::markdown: return "markdown";
    case Format::csv: return "csv";
    case Format::html: return "html";
  }
  return "?";
}

inline Format format_from_string(std::string_view s) {
  if (s == "markdown" || s == "md") return Format::markdown;
  if (s == "csv") return Format::csv;
  if (s == "html") return Format::html;
  throw std::invalid_argument("unknown format: " + std::string(s));
}

// Per-cell layout variation for data rows: pad[r][c] filler tokens before
// the value, blank[r][c] drops the value (the cell keeps its delimiters).
struct CellLayout {
  std::vector<std::vector<int>> pad;
  std::vector<std::vector<char>> blank;

  int pad_at(int r, int c) const { return pad.empty() ? 0 : pad.at(r).at(c); }
  bool blank_at(int r, int c) const { return !blank.empty() && blank.at(r).at(c); }
};

struct SerializeOptions {
  bool markdown_separator = true;
  const CellLayout* layout = nullptr;
};

// Token-level serialization. value_pos[g][c] is the token index of the word
// at grid row g (0 = header row, i + 1 = data row i) and column c.
struct SerializedTable {
  std::vector<int> ids;
  std::vector<std::vector<int>> value_pos;
};

inline SerializedTable serialize_tokens(const Vocab& vocab, const Table& table, Format format,
                                        const std::optional<NoiseDirective>& noise = std::nullopt,
                                        const SerializeOptions& opts = {}) {
  SerializedTable out;
  auto& ids = out.ids;
  const int n_cols = table.cols();
  out.value_pos.assign(table.rows() + 1, std::vector<int>(n_cols, -1));

  auto emit_noise = [&](int grid_row, int col, NoisePlacement where) {
    if (!noise || noise->spec.amount == 0) return;
    if (noise->row + 1 != grid_row || noise->col != col || noise->spec.placement != where) return;
    int filler = 0;
    for (int k = 0; k < noise->spec.amount; ++k) {
      if (noise->spec.kind == NoiseKind::structural_pipes) {
        switch (format) {
          case Format::markdown: ids.push_back(Vocab::pipe); break;
          case Format::csv: ids.push_back(Vocab::comma); break;
          case Format::html:
            ids.push_back(Vocab::td_close);
            ids.push_back(Vocab::td_open);
            break;
        }
      } else {
        const int units = format == Format::html ? 2 : 1;
        for (int u = 0; u < units; ++u) ids.push_back(Vocab::filler_begin + (filler++ % Vocab::n_filler));
      }
    }
  };

  auto emit_row = [&](int grid_row, const std::vector<std::string>& words) {
    if (format == Format::html) ids.push_back(Vocab::tr_open);
    if (format == Format::markdown) ids.push_back(Vocab::pipe);
    for (int c = 0; c < n_cols; ++c) {
      if (format == Format::html) ids.push_back(Vocab::td_open);
      emit_noise(grid_row, c, NoisePlacement::before_target);
      const bool data = grid_row > 0 && opts.layout;
      if (data)
        for (int k = 0; k < opts.layout->pad_at(grid_row - 1, c); ++k)
          ids.push_back(Vocab::filler_begin + (k % Vocab::n_filler));
      if (!(data && opts.layout->blank_at(grid_row - 1, c))) {
        out.value_pos[grid_row][c] = static_cast<int>(ids.size());
        ids.push_back(vocab.id(words[c]));
      }
      emit_noise(grid_row, c, NoisePlacement::after_target);
      switch (format) {
        case Format::markdown: ids.push_back(Vocab::pipe); break;
        case Format::csv: ids.push_back(c + 1 < n_cols ? Vocab::comma : Vocab::newline); break;
        case Format::html: ids.push_back(Vocab::td_close); break;
      }
    }
    if (format == Format::html) ids.push_back(Vocab::tr_close);
    if (format != Format::csv) ids.push_back(Vocab::newline);
  };

  emit_row(0, table.col_headers);
  if (format == Format::markdown && opts.markdown_separator) {
    ids.push_back(Vocab::pipe);
    for (int c = 0; c < n_cols; ++c) {
      ids.push_back(Vocab::dash_run);
      ids.push_back(Vocab::pipe);
    }
    ids.push_back(Vocab::newline);
  }
  for (int r = 0; r < table.rows(); ++r) emit_row(r + 1, table.cells[r]);
  return out;
}

struct CharRange {
  std::size_t begin = 0, end = 0;
};

// Text form plus character ranges of every header and cell, keyed by grid
// position (row 0 = header row).
struct SerializedText {
  std::string text;
  std::vector<std::vector<CharRange>> cell_chars;
};

inline SerializedText serialize(const Vocab& vocab, const Table& table, Format format,
                                const std::optional<NoiseDirective>& noise = std::nullopt,
                                const SerializeOptions& opts = {}) {
  const auto st = serialize_tokens(vocab, table, format, noise, opts);
  SerializedText out;
  std::vector<CharRange> tok_chars(st.ids.size());
  bool line_start = true;
  for (std::size_t i = 0; i < st.ids.size(); ++i) {
    const int id = st.ids[i];
    if (id == Vocab::newline) {
      tok_chars[i] = {out.text.size(), out.text.size() + 1};
      out.text.push_back('\n');
      line_start = true;
      continue;
    }
    if (!line_start) out.text.push_back(' ');
    tok_chars[i].begin = out.text.size();
    out.text += vocab.word(id);
    tok_chars[i].end = out.text.size();
    line_start = false;
  }
  out.cell_chars.resize(st.value_pos.size());
  for (std::size_t g = 0; g < st.value_pos.size(); ++g)
    for (int p : st.value_pos[g]) out.cell_chars[g].push_back(p < 0 ? CharRange{} : tok_chars[static_cast<std::size_t>(p)]);
  return out;
}

struct Span {
  int begin = 0;
  int end = 0;  // exclusive
  int size() const { return end - begin; }
  bool contains(int i) const { return i >= begin && i < end; }
  bool operator==(const Span&) const = default;
};

// The fixed one-shot demonstration prepended to every prompt.
struct Demo {
  Table table;
  QuerySpec query;
};

inline Demo make_demo(const EntityPool& pool, std::uint64_t seed, int rows = 3, int cols = 3) {
  Rng rng = make_stream(seed, 0xde30de30ULL);
  Demo d;
  d.table = generate_table(pool, {rows, rows, cols, cols}, rng);
  d.query = make_query(d.table, QueryKind::atomic, 1, rng);
  return d;
}

// Span names: q_row, q_col (query constraints), t_row, t_col (matching table
// headers), t_cell (answer cell), their "_foil" counterparts when built from a
// corrupted pair. Extra targets of multi-cell queries get a ".k" suffix
// (q_col.1, t_cell.2, ...).
struct PromptInstance {
  std::vector<int> token_ids;
  Format format = Format::markdown;
  std::map<std::string, Span> spans;
  std::vector<int> answer_ids;
  std::vector<int> foil_ids;
  int answer_position = 0;
  Span table;
  Span query;
  int grid_rows = 0;  // data rows + header row
  int grid_cols = 0;
  CorruptionAxis axis = CorruptionAxis::column;
  bool corrupted = false;

  const Span& span(const std::string& name) const {
    auto it = spans.find(name);
    if (it == spans.end()) throw std::out_of_range("prompt: no span named " + name);
    return it->second;
  }
  bool has_span(const std::string& name) const { return spans.count(name) > 0; }
  int length() const { return static_cast<int>(token_ids.size()); }
  // Position whose logits predict the first answer token.
  int predict_position() const { return answer_position - 1; }
};

inline std::string indexed_name(const std::string& base, std::size_t k) {
  return k == 0 ? base : base + "." + std::to_string(k);
}

namespace detail {

// Appends "Q: <question> A:" and returns (span of the whole question block,
// token index of every row / column constraint).
struct QueryTokens {
  std::vector<int> row_pos, col_pos;
};

inline QueryTokens append_question(const Vocab& vocab, const Table& table, const QuerySpec& q, std::vector<int>& ids) {
  QueryTokens qt;
  ids.push_back(vocab.id("Q:"));
  const auto& tmpl = query_templates().at(static_cast<std::size_t>(q.template_id));
  for (auto w : tmpl.words) {
    if (w == "{c}" || w == "{r}") {
      const bool is_col = w == "{c}";
      const auto& targets = is_col ? q.col_targets : q.row_targets;
      for (std::size_t k = 0; k < targets.size(); ++k) {
        if (k > 0) ids.push_back(vocab.id("and"));
        (is_col ? qt.col_pos : qt.row_pos).push_back(static_cast<int>(ids.size()));
        ids.push_back(vocab.id(is_col ? table.col_headers.at(targets[k]) : table.row_headers.at(targets[k])));
      }
    } else {
      ids.push_back(vocab.id(w));
    }
  }
  ids.push_back(vocab.id("A:"));
  return qt;
}

inline std::vector<int> answer_tokens(const Vocab& vocab, const Table& table, const QuerySpec& q) {
  std::vector<int> out;
  for (auto [r, c] : q.answer_cells()) {
    if (!out.empty()) out.push_back(Vocab::comma);
    out.push_back(vocab.id(table.at(r, c)));
  }
  return out;
}

}  // namespace detail

struct AssembleOptions {
  Format format = Format::markdown;
  SerializeOptions serialize;
  int max_seq_len = 0;  // 0 = unchecked; counts prompt + answer + stop token
};

inline PromptInstance assemble_prompt(const Vocab& vocab, const std::optional<Demo>& demo, const Table& table,
                                      const QuerySpec& query, const AssembleOptions& opts = {},
                                      const std::optional<CorruptedPair>& corruption = std::nullopt,
                                      const std::optional<NoiseDirective>& noise = std::nullopt) {
  PromptInstance p;
  p.format = opts.format;
  auto& ids = p.token_ids;
  ids.push_back(Vocab::bos);
  if (demo) {
    const auto st = serialize_tokens(vocab, demo->table, opts.format, std::nullopt, opts.serialize);
    ids.insert(ids.end(), st.ids.begin(), st.ids.end());
    detail::append_question(vocab, demo->table, demo->query, ids);
    const auto ans = detail::answer_tokens(vocab, demo->table, demo->query);
    ids.insert(ids.end(), ans.begin(), ans.end());
    ids.push_back(Vocab::newline);
  }

  const int table_begin = static_cast<int>(ids.size());
  const auto st = serialize_tokens(vocab, table, opts.format, noise, opts.serialize);
  ids.insert(ids.end(), st.ids.begin(), st.ids.end());
  p.table = {table_begin, static_cast<int>(ids.size())};
  p.grid_rows = table.rows() + 1;
  p.grid_cols = table.cols();

  const int query_begin = static_cast<int>(ids.size());
  const auto qt = detail::append_question(vocab, table, query, ids);
  p.query = {query_begin, static_cast<int>(ids.size())};
  p.answer_position = static_cast<int>(ids.size());
  p.answer_ids = detail::answer_tokens(vocab, table, query);

  auto one = [](int pos) { return Span{pos, pos + 1}; };
  auto cell_pos = [&](int r, int c) { return table_begin + st.value_pos.at(r + 1).at(c); };
  for (std::size_t k = 0; k < qt.col_pos.size(); ++k) {
    p.spans[indexed_name("q_col", k)] = one(qt.col_pos[k]);
    p.spans[indexed_name("t_col", k)] = one(table_begin + st.value_pos.at(0).at(query.col_targets[k]));
  }
  for (std::size_t k = 0; k < qt.row_pos.size(); ++k) {
    p.spans[indexed_name("q_row", k)] = one(qt.row_pos[k]);
    p.spans[indexed_name("t_row", k)] = one(cell_pos(query.row_targets[k], 0));
  }
  const auto cells = query.answer_cells();
  for (std::size_t k = 0; k < cells.size(); ++k)
    p.spans[indexed_name("t_cell", k)] = one(cell_pos(cells[k].first, cells[k].second));

  if (corruption) {
    if (!(corruption->clean_table == table) || !(corruption->clean_query == query))
      throw std::logic_error("assemble_prompt: corruption does not belong to this table/query");
    p.corrupted = true;
    p.axis = corruption->axis;
    const int rp = corruption->foil_row(), cp = corruption->foil_col();
    if (corruption->axis != CorruptionAxis::row)
      p.spans["t_col_foil"] = one(table_begin + st.value_pos.at(0).at(cp));
    if (corruption->axis != CorruptionAxis::column) p.spans["t_row_foil"] = one(cell_pos(rp, 0));
    p.spans["t_cell_foil"] = one(cell_pos(rp, cp));
    p.foil_ids = {vocab.id(corruption->foil)};
  }

  for (const auto& [name, s] : p.spans)
    if (s.begin < 0 || s.end > p.length() || s.begin >= s.end)
      throw std::logic_error("assemble_prompt: span " + name + " unresolved");

  if (opts.max_seq_len > 0 && p.length() + static_cast<int>(p.answer_ids.size()) + 1 > opts.max_seq_len)
    throw std::length_error("assemble_prompt: prompt of " + std::to_string(p.length()) +
                            " tokens exceeds the context length " + std::to_string(opts.max_seq_len));
  return p;
}

// ---------------------------------------------------------------------------
// Patching regions

inline constexpr int kNumRegions = 15;

using RegionMap = std::vector<int>;

// Focus regions (even ids) are resolved by role:
//   2 counterfactual header (column foil header; row foil header for row-axis
//     pairs), 4 target column header, 6 target row header, 8 foil cell,
//   10 target cell, 12 query column constraint, 14 query row constraint.
// Every other token takes the context id of the closest focus span before it:
// 1 before any focus, 3 between the two header spans, 5 after the header
// spans, 7 after the row header, 9 between the two cell spans, 11 after the
// cell spans, 13 between the query constraints, 15 after them.
inline RegionMap segment_regions(const PromptInstance& p) {
  if (!p.corrupted || !p.has_span("t_cell_foil"))
    throw std::invalid_argument("segment_regions: prompt was not built from a corrupted pair");
  const std::string foil_header = p.axis == CorruptionAxis::row ? "t_row_foil" : "t_col_foil";
  const std::vector<std::pair<int, std::string>> focus{
      {2, foil_header}, {4, "t_col"}, {6, "t_row"}, {8, "t_cell_foil"}, {10, "t_cell"}, {12, "q_col"}, {14, "q_row"}};

  RegionMap region(static_cast<std::size_t>(p.length()), 0);
  for (const auto& [id, name] : focus) {
    const Span& s = p.span(name);
    for (int i = s.begin; i < s.end; ++i) {
      if (region[i] != 0) throw std::logic_error("segment_regions: overlapping focus spans");
      region[i] = id;
    }
  }
  auto between = [&](int i, const std::string& a, const std::string& b) {
    const Span& sa = p.span(a);
    const Span& sb = p.span(b);
    const int lo = std::min(sa.end, sb.end);
    const int hi = std::max(sa.begin, sb.begin);
    return i >= lo && i < hi;
  };
  int last_focus = 0;
  for (int i = 0; i < p.length(); ++i) {
    if (region[i] != 0) {
      last_focus = region[i];
      continue;
    }
    if (between(i, foil_header, "t_col")) region[i] = 3;
    else if (between(i, "t_cell_foil", "t_cell")) region[i] = 9;
    else {
      switch (last_focus) {
        case 0: region[i] = 1; break;
        case 2: case 4: region[i] = 5; break;
        case 6: region[i] = 7; break;
        case 8: case 10: region[i] = 11; break;
        case 12: region[i] = 13; break;
        default: region[i] = 15; break;
      }
    }
  }
  return region;
}

// Token ranges per region id (index 0 unused).
inline std::vector<std::vector<int>> region_positions(const RegionMap& m) {
  std::vector<std::vector<int>> out(kNumRegions + 1);
  for (std::size_t i = 0; i < m.size(); ++i) out.at(static_cast<std::size_t>(m[i])).push_back(static_cast<int>(i));
  return out;
}

// ---------------------------------------------------------------------------
// Table coordinates

enum class TokenClass { cell, delimiter, header, other };

inline std::string_view to_string(TokenClass c) {
  switch (c) {
    case TokenClass::cell: return "cell";
    case TokenClass::delimiter: return "delimiter";
    case TokenClass::header: return "header";
    case TokenClass::other: return "other";
  }
  return "?";
}

// r_idx: 0 for the header row, i + 1 for data row i; c_idx counts cells
// from 0. Both are -1 outside the table. Delimiters carry the index of the
// cell they close.
struct TokenCoords {
  std::vector<int> r_idx;
  std::vector<int> c_idx;
  std::vector<TokenClass> cls;
};

// Single left-to-right scan over the table region that only looks at
// delimiter and row-boundary tokens.
inline TokenCoords token_coords(const PromptInstance& p) {
  const int n = p.length();
  TokenCoords tc{std::vector<int>(n, -1), std::vector<int>(n, -1), std::vector<TokenClass>(n, TokenClass::other)};
  const auto& ids = p.token_ids;
  int row = -1;       // grid row of the current line
  int count = 0;      // delimiters seen in the current row
  bool at_line_start = true;
  bool skip_line = false;
  auto classify_value = [&](int i, int c) {
    tc.r_idx[i] = row;
    tc.c_idx[i] = c;
    tc.cls[i] = (row == 0 || c == 0) ? TokenClass::header : TokenClass::cell;
  };

  for (int i = p.table.begin; i < p.table.end; ++i) {
    const int id = ids[i];
    switch (p.format) {
      case Format::markdown:
        if (at_line_start) {
          at_line_start = false;
          skip_line = i + 1 < p.table.end && ids[i + 1] == Vocab::dash_run;
          if (!skip_line) ++row;
          count = 0;
        }
        if (id == Vocab::newline) {
          at_line_start = true;
          break;
        }
        if (skip_line) break;
        if (id == Vocab::pipe) {
          ++count;
          tc.r_idx[i] = row;
          tc.c_idx[i] = count - 2;
          tc.cls[i] = TokenClass::delimiter;
        } else if (!Vocab::is_filler(id)) {
          classify_value(i, count - 1);
        }
        break;
      case Format::csv:
        if (at_line_start) {
          at_line_start = false;
          ++row;
          count = 0;
        }
        if (id == Vocab::comma || id == Vocab::newline) {
          tc.r_idx[i] = row;
          tc.c_idx[i] = count;
          tc.cls[i] = TokenClass::delimiter;
          ++count;
          if (id == Vocab::newline) at_line_start = true;
        } else if (!Vocab::is_filler(id)) {
          classify_value(i, count);
        }
        break;
      case Format::html:
        if (id == Vocab::tr_open) {
          ++row;
          count = 0;
        } else if (id == Vocab::td_open) {
          ++count;
        } else if (id == Vocab::td_close) {
          tc.r_idx[i] = row;
          tc.c_idx[i] = count - 1;
          tc.cls[i] = TokenClass::delimiter;
        } else if (id != Vocab::tr_close && id != Vocab::newline && !Vocab::is_filler(id)) {
          classify_value(i, count - 1);
        }
        break;
    }
  }
  return tc;
}

// Debug dump used by golden tests and the `eval --dump` path.
inline nlohmann::json prompt_dump(const Vocab& vocab, const PromptInstance& p, const RegionMap* regions = nullptr) {
  using nlohmann::json;
  const auto coords = token_coords(p);
  json tokens = json::array();
  for (int i = 0; i < p.length(); ++i) {
    json t{{"i", i},
           {"word", vocab.word(p.token_ids[i])},
           {"r_idx", coords.r_idx[i]},
           {"c_idx", coords.c_idx[i]},
           {"class", std::string(to_string(coords.cls[i]))}};
    if (regions) t["region"] = (*regions)[i];
    tokens.push_back(std::move(t));
  }
  json spans = json::object();
  for (const auto& [name, s] : p.spans) spans[name] = {s.begin, s.end};
  json answer = json::array();
  for (int id : p.answer_ids) answer.push_back(vocab.word(id));
  return json{{"format", std::string(to_string(p.format))},
              {"answer_position", p.answer_position},
              {"table", {p.table.begin, p.table.end}},
              {"query", {p.query.begin, p.query.end}},
              {"answer", answer},
              {"spans", spans},
              {"tokens", tokens}};
}

}  // namespace tablelab
