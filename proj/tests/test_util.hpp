#pragma once

// Shared fixtures: a small workspace and randomly initialized models.

#include <random>

#include "tablelab/dataset.hpp"
#include "tablelab/model.hpp"

namespace testutil {

inline tablelab::DatasetConfig small_dataset(int max_dim = 5) {
  tablelab::DatasetConfig dc;
  dc.seed = 17;
  dc.n_categories = 10;
  dc.values_per_category = 8;
  dc.n_key_values = 12;
  dc.min_rows = dc.min_cols = 4;
  dc.max_rows = dc.max_cols = max_dim;
  dc.demo = false;
  dc.max_subset = 2;
  return dc;
}

inline tablelab::ModelConfig small_model(int vocab, int layers = 3) {
  tablelab::ModelConfig c;
  c.n_layers = layers;
  c.n_heads = 2;
  c.d_model = 32;
  c.d_head = 16;
  c.d_mlp = 48;
  c.vocab_size = vocab;
  c.max_seq_len = 160;
  return c;
}

// Large random weights so that clean and corrupt runs differ clearly.
inline tablelab::Model<float> random_model(const tablelab::ModelConfig& c, std::uint64_t seed, double scale = 0.25) {
  auto m = tablelab::init_model<float>(c, seed);
  tablelab::Rng rng = tablelab::make_stream(seed, 77);
  std::normal_distribution<double> n(0.0, 1.0);
  m.w.visit([&](const std::string&, std::string_view fam, tablelab::MatF& t) {
    if (tablelab::is_norm_family(fam)) return;
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = static_cast<float>(scale * n(rng));
  });
  return m;
}

}  // namespace testutil
