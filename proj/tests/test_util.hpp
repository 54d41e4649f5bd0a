#pragma once

#include <vector>

#include "headprune/encoder.hpp"
#include "headprune/rng.hpp"

namespace headprune::testing {

/// Random token batch with ragged lengths (so padding is exercised) and a
/// second segment starting midway through each row.
inline Batch random_batch(const ModelConfig& c, Rng& rng, std::size_t size, std::size_t max_len) {
  std::vector<std::vector<int>> toks(size), segs(size);
  for (std::size_t i = 0; i < size; ++i) {
    const std::size_t len = 2 + rng.below(max_len - 1);
    for (std::size_t j = 0; j < len; ++j) {
      toks[i].push_back(static_cast<int>(1 + rng.below(c.vocab_size - 1)));
      segs[i].push_back(j >= len / 2 ? 1 : 0);
    }
  }
  return Batch::from_sequences(toks, segs, 0);
}

inline HeadMask random_mask(const ModelConfig& c, Rng& rng, double p_pruned) {
  HeadMask m = HeadMask::all_alive(c);
  for (std::size_t l = 0; l < c.n_layers; ++l)
    for (std::size_t h = 0; h < c.n_heads; ++h)
      if (rng.bernoulli(p_pruned)) m.set(l, h, false);
  return m;
}

inline ModelConfig tiny_config() {
  ModelConfig c;
  c.n_layers = 4;
  c.n_heads = 4;
  c.d_model = 8;
  c.d_ff = 12;
  c.vocab_size = 23;
  c.max_seq_len = 10;
  return c;
}

}  // namespace headprune::testing
