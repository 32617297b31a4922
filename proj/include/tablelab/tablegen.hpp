#pragma once

// Seeded synthetic tables, cell-location queries, counterfactual corruptions
// and noise directives.

#include <algorithm>
#include <array>
#include <cstdint>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "tablelab/rng.hpp"

namespace tablelab {

struct Category {
  std::string name;
  std::vector<std::string> values;
};

struct EntityPool {
  std::vector<Category> categories;
  std::vector<std::string> primary_key_names;
  // Row-header identifiers. Disjoint from every category's values.
  std::vector<std::string> key_values;

  std::size_t min_values_per_category() const {
    std::size_t m = key_values.size();
    for (const auto& c : categories) m = std::min(m, c.values.size());
    return m;
  }
};

struct DimsRange {
  int min_rows = 4, max_rows = 8;
  int min_cols = 4, max_cols = 8;

  static DimsRange desk() { return {4, 8, 4, 8}; }
  static DimsRange paper() { return {4, 20, 4, 20}; }
  static DimsRange square(int lo, int hi) { return {lo, hi, lo, hi}; }
};

// cells[i][0] is the row header of row i; col_headers[0] is the primary key.
struct Table {
  std::vector<std::string> col_headers;
  std::vector<std::string> row_headers;
  std::vector<std::vector<std::string>> cells;

  int rows() const { return static_cast<int>(row_headers.size()); }
  int cols() const { return static_cast<int>(col_headers.size()); }
  const std::string& at(int r, int c) const { return cells.at(r).at(c); }

  bool operator==(const Table&) const = default;
};

enum class QueryKind { atomic, multi_row, multi_col };

inline std::string_view to_string(QueryKind k) {
  switch (k) {
    case QueryKind::atomic: return "atomic";
    case QueryKind::multi_row: return "multi_row";
    case QueryKind::multi_col: return "multi_col";
  }
  return "?";
}

inline QueryKind query_kind_from_string(std::string_view s) {
  if (s == "atomic") return QueryKind::atomic;
  if (s == "multi_row") return QueryKind::multi_row;
  if (s == "multi_col") return QueryKind::multi_col;
  throw std::invalid_argument("unknown query kind: " + std::string(s));
}

// Targets are indices into the table. Column targets never include 0.
struct QuerySpec {
  QueryKind kind = QueryKind::atomic;
  std::vector<int> row_targets;
  std::vector<int> col_targets;
  int template_id = 0;

  bool operator==(const QuerySpec&) const = default;

  // Answer cells in answer order: rows vary fastest for multi_row, columns for multi_col.
  std::vector<std::pair<int, int>> answer_cells() const {
    std::vector<std::pair<int, int>> out;
    for (int r : row_targets)
      for (int c : col_targets) out.emplace_back(r, c);
    return out;
  }
};

// Natural-language question templates. "{c}" and "{r}" expand to the column
// and row constraints; multiple constraints are joined with "and". Every
// template places the column constraint before the row constraint.
struct QueryTemplate {
  std::vector<std::string_view> words;
};

inline const std::array<QueryTemplate, 3>& query_templates() {
  static const std::array<QueryTemplate, 3> t{{
      {{"what", "is", "the", "{c}", "for", "{r}", "?"}},
      {{"find", "the", "{c}", "of", "{r}", "?"}},
      {{"give", "the", "{c}", "value", "for", "{r}", "?"}},
  }};
  return t;
}

inline const std::vector<std::string>& primary_key_name_list() {
  static const std::vector<std::string> names{"name", "id", "key", "item", "entry", "label"};
  return names;
}

// Words that only ever appear in prompt scaffolding; entity generation skips them.
inline const std::set<std::string, std::less<>>& scaffold_words() {
  static const std::set<std::string, std::less<>> words = [] {
    std::set<std::string, std::less<>> w{"and", "Q:", "A:"};
    for (const auto& t : query_templates())
      for (auto x : t.words)
        if (x != "{c}" && x != "{r}") w.emplace(x);
    for (const auto& n : primary_key_name_list()) w.insert(n);
    return w;
  }();
  return words;
}

namespace detail {

inline std::string pseudo_word(Rng& rng, int min_syll, int max_syll) {
  static constexpr std::string_view consonants = "bdfgklmnprstvz";
  static constexpr std::string_view vowels = "aeiou";
  const int n = uniform_int(rng, min_syll, max_syll);
  std::string w;
  for (int i = 0; i < n; ++i) {
    w.push_back(consonants[uniform_index(rng, consonants.size())]);
    w.push_back(vowels[uniform_index(rng, vowels.size())]);
  }
  return w;
}

class WordSource {
 public:
  explicit WordSource(Rng& rng) : rng_(rng) {}

  std::string next(int min_syll, int max_syll, bool capitalize) {
    for (int attempt = 0; attempt < 100000; ++attempt) {
      std::string w = pseudo_word(rng_, min_syll, max_syll);
      if (capitalize) w[0] = static_cast<char>(w[0] - 'a' + 'A');
      if (scaffold_words().count(w) || used_.count(w)) continue;
      used_.insert(w);
      return w;
    }
    throw std::runtime_error("entity pool: word space exhausted");
  }

 private:
  Rng& rng_;
  std::unordered_set<std::string> used_;
};

}  // namespace detail

// Category names are capitalized pseudo-words, values and row keys are
// lower-case pseudo-words. All surface words in the pool are distinct.
inline EntityPool build_entity_pool(std::uint64_t seed, int n_categories, int values_per_category,
                                    int n_key_values = -1) {
  if (n_categories < 2) throw std::invalid_argument("entity pool: need at least 2 categories");
  if (values_per_category < 1) throw std::invalid_argument("entity pool: values_per_category must be positive");
  if (n_key_values < 0) n_key_values = std::max(values_per_category, 32);
  const double total = double(n_categories) * (values_per_category + 1) + n_key_values;
  // 70 two-letter syllables, words of 2..4 syllables.
  constexpr double capacity = 70.0 * 70 + 70.0 * 70 * 70 + 70.0 * 70 * 70 * 70;
  if (total > capacity / 4)
    throw std::invalid_argument("entity pool: requested size cannot be made disjoint in the word space");

  Rng rng = make_stream(seed, 0xe7717);
  detail::WordSource words(rng);
  EntityPool pool;
  pool.primary_key_names = primary_key_name_list();
  pool.categories.resize(n_categories);
  for (auto& cat : pool.categories) {
    cat.name = words.next(2, 3, true);
    cat.values.reserve(values_per_category);
    for (int i = 0; i < values_per_category; ++i) cat.values.push_back(words.next(2, 3, false));
  }
  for (int i = 0; i < n_key_values; ++i) pool.key_values.push_back(words.next(2, 4, false));
  return pool;
}

inline Table generate_table(const EntityPool& pool, const DimsRange& dims, Rng& rng) {
  if (dims.min_rows < 1 || dims.min_cols < 2 || dims.min_rows > dims.max_rows || dims.min_cols > dims.max_cols)
    throw std::invalid_argument("generate_table: invalid dims range");
  const int n_rows = uniform_int(rng, dims.min_rows, dims.max_rows);
  const int n_cols = uniform_int(rng, dims.min_cols, dims.max_cols);
  if (n_cols - 1 > static_cast<int>(pool.categories.size()))
    throw std::runtime_error("generate_table: pool has too few categories for " + std::to_string(n_cols) + " columns");
  if (n_rows > static_cast<int>(pool.min_values_per_category()))
    throw std::runtime_error("generate_table: pool has too few values for " + std::to_string(n_rows) + " rows");

  Table t;
  t.col_headers.push_back(pool.primary_key_names[uniform_index(rng, pool.primary_key_names.size())]);
  const auto cats = sample_without_replacement(rng, pool.categories.size(), n_cols - 1);
  for (auto ci : cats) t.col_headers.push_back(pool.categories[ci].name);
  for (auto ki : sample_without_replacement(rng, pool.key_values.size(), n_rows))
    t.row_headers.push_back(pool.key_values[ki]);

  t.cells.assign(n_rows, std::vector<std::string>(n_cols));
  for (int r = 0; r < n_rows; ++r) t.cells[r][0] = t.row_headers[r];
  for (int c = 1; c < n_cols; ++c) {
    const auto& values = pool.categories[cats[c - 1]].values;
    const auto picks = sample_without_replacement(rng, values.size(), n_rows);
    for (int r = 0; r < n_rows; ++r) t.cells[r][c] = values[picks[r]];
  }
  return t;
}

inline QuerySpec make_query(const Table& table, QueryKind kind, int subset_size, Rng& rng) {
  if (subset_size < 1) throw std::invalid_argument("make_query: subset_size must be >= 1");
  QuerySpec q;
  q.kind = kind;
  int n_r = 1, n_c = 1;
  if (kind == QueryKind::multi_row) n_r = subset_size;
  if (kind == QueryKind::multi_col) n_c = subset_size;
  if (kind == QueryKind::atomic && subset_size != 1)
    throw std::invalid_argument("make_query: atomic queries target exactly one cell");
  if (n_r > table.rows()) throw std::invalid_argument("make_query: subset_size exceeds row count");
  if (n_c > table.cols() - 1) throw std::invalid_argument("make_query: subset_size exceeds non-key column count");
  for (auto r : sample_without_replacement(rng, table.rows(), n_r)) q.row_targets.push_back(static_cast<int>(r));
  for (auto c : sample_without_replacement(rng, table.cols() - 1, n_c)) q.col_targets.push_back(static_cast<int>(c) + 1);
  q.template_id = static_cast<int>(uniform_index(rng, query_templates().size()));
  return q;
}

enum class CorruptionAxis { row, column, both };

inline std::string_view to_string(CorruptionAxis a) {
  switch (a) {
    case CorruptionAxis::row: return "row";
    case CorruptionAxis::column: return "column";
    case CorruptionAxis::both: return "both";
  }
  return "?";
}

inline CorruptionAxis corruption_axis_from_string(std::string_view s) {
  if (s == "row") return CorruptionAxis::row;
  if (s == "column") return CorruptionAxis::column;
  if (s == "both") return CorruptionAxis::both;
  throw std::invalid_argument("unknown corruption axis: " + std::string(s));
}

// Same table on both sides; only the query constraint changes.
struct CorruptedPair {
  Table clean_table;
  QuerySpec clean_query;
  QuerySpec corrupt_query;
  CorruptionAxis axis = CorruptionAxis::column;
  std::string gold;
  std::string foil;

  int row() const { return clean_query.row_targets.at(0); }
  int col() const { return clean_query.col_targets.at(0); }
  int foil_row() const { return corrupt_query.row_targets.at(0); }
  int foil_col() const { return corrupt_query.col_targets.at(0); }
};

inline CorruptedPair make_corruption(const Table& table, const QuerySpec& query, CorruptionAxis axis, Rng& rng) {
  if (query.kind != QueryKind::atomic) throw std::invalid_argument("make_corruption: atomic queries only");
  if (table.rows() < 2 || table.cols() < 3)
    throw std::invalid_argument("make_corruption: need >= 2 rows and >= 2 non-key columns");
  CorruptedPair p;
  p.clean_table = table;
  p.clean_query = query;
  p.corrupt_query = query;
  p.axis = axis;
  const int r = query.row_targets.at(0);
  const int c = query.col_targets.at(0);
  if (axis != CorruptionAxis::column) {
    int rp = static_cast<int>(uniform_index(rng, table.rows() - 1));
    if (rp >= r) ++rp;
    p.corrupt_query.row_targets[0] = rp;
  }
  if (axis != CorruptionAxis::row) {
    // Non-key columns other than c: 1..cols-1 minus c.
    int cp = 1 + static_cast<int>(uniform_index(rng, table.cols() - 2));
    if (cp >= c) ++cp;
    p.corrupt_query.col_targets[0] = cp;
  }
  p.gold = table.at(r, c);
  p.foil = table.at(p.foil_row(), p.foil_col());
  return p;
}

enum class NoiseKind { structural_pipes, length_filler };
enum class NoisePlacement { before_target, after_target };

inline std::string_view to_string(NoiseKind k) {
  return k == NoiseKind::structural_pipes ? "structural_pipes" : "length_filler";
}
inline std::string_view to_string(NoisePlacement p) {
  return p == NoisePlacement::before_target ? "before_target" : "after_target";
}
inline NoiseKind noise_kind_from_string(std::string_view s) {
  if (s == "structural_pipes") return NoiseKind::structural_pipes;
  if (s == "length_filler") return NoiseKind::length_filler;
  throw std::invalid_argument("unknown noise kind: " + std::string(s));
}
inline NoisePlacement noise_placement_from_string(std::string_view s) {
  if (s == "before_target") return NoisePlacement::before_target;
  if (s == "after_target") return NoisePlacement::after_target;
  throw std::invalid_argument("unknown noise placement: " + std::string(s));
}

struct NoiseSpec {
  NoiseKind kind = NoiseKind::structural_pipes;
  NoisePlacement placement = NoisePlacement::before_target;
  int amount = 2;

  bool operator==(const NoiseSpec&) const = default;
};

// Resolved insertion point for the serializer: `amount` noise units go
// immediately before (or after) the value token of cell (row, col).
struct NoiseDirective {
  NoiseSpec spec;
  int row = 0;
  int col = 0;

  bool operator==(const NoiseDirective&) const = default;
};

inline NoiseDirective inject_noise(const Table& table, const QuerySpec& query, const NoiseSpec& spec) {
  if (spec.amount < 0) throw std::invalid_argument("inject_noise: negative amount");
  if (query.row_targets.empty() || query.col_targets.empty())
    throw std::invalid_argument("inject_noise: query has no target cell");
  NoiseDirective d{spec, query.row_targets[0], query.col_targets[0]};
  if (d.row < 0 || d.row >= table.rows() || d.col < 0 || d.col >= table.cols())
    throw std::out_of_range("inject_noise: target outside table");
  // Inserting before the key column would move the row start itself.
  if (d.col == 0 && spec.placement == NoisePlacement::before_target && spec.amount > 0)
    throw std::invalid_argument("inject_noise: before_target placement would span the row start");
  return d;
}

}  // namespace tablelab
