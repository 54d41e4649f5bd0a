#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "headprune/encoder.hpp"

namespace headprune {

enum class LayerSet { Top, Bottom, Middle, Odd, Even };

std::string to_string(LayerSet set);
/// Accepts "top", "bottom", "middle", "odd", "even" in any letter case.
LayerSet parse_layer_set(const std::string& name);

inline constexpr double kMaxPruneFraction = 0.9;

/// round-half-away-from-zero(k * total_heads).
std::size_t heads_to_prune(const ModelConfig& config, double k);

/// Masks exactly heads_to_prune(config, k) heads drawn uniformly without
/// replacement. Throws std::out_of_range unless 0 <= k <= 0.9.
HeadMask random_prune(const ModelConfig& config, double k, std::uint64_t seed);

/// 1-based layers selected by a named set: Top/Bottom are the last/first
/// `count` layers, Middle is the centred band (floor offset), Odd/Even are the
/// first `count` odd/even layers from the bottom.
/// Throws std::out_of_range when the set cannot hold `count` layers.
std::vector<std::size_t> layer_set_indices(std::size_t n_layers, LayerSet set, std::size_t count);

/// Masks every head of the selected layers and nothing else.
HeadMask layer_prune(const ModelConfig& config, LayerSet set, std::size_t count);

struct MaskStats {
  std::size_t pruned_count = 0;
  double pruned_fraction = 0.0;
  std::vector<std::size_t> per_layer_alive;  // bottom layer first
};

MaskStats mask_stats(const HeadMask& mask);

/// One pruning policy of an experiment grid. Text form: "random:0.5",
/// "top:6", "middle:6", "odd:3", ...
struct PruningPolicy {
  enum class Kind { RandomFraction, LayerSet };

  Kind kind = Kind::RandomFraction;
  double fraction = 0.0;  // RandomFraction
  LayerSet layers = LayerSet::Top;
  std::size_t count = 0;  // LayerSet

  static PruningPolicy random(double k) { return {Kind::RandomFraction, k, LayerSet::Top, 0}; }
  static PruningPolicy layer_set(LayerSet set, std::size_t count) {
    return {Kind::LayerSet, 0.0, set, count};
  }

  /// Throws std::out_of_range when the policy cannot apply to `config`.
  void validate(const ModelConfig& config) const;
  /// `seed` only affects random policies.
  HeadMask mask(const ModelConfig& config, std::uint64_t seed) const;
  bool is_identity() const;

  std::string to_string() const;
  static PruningPolicy parse(const std::string& text);

  friend bool operator==(const PruningPolicy&, const PruningPolicy&) = default;
};

}  // namespace headprune
