#include "headprune/pruning.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "headprune/rng.hpp"

namespace headprune {

std::string to_string(LayerSet set) {
  switch (set) {
    case LayerSet::Top: return "top";
    case LayerSet::Bottom: return "bottom";
    case LayerSet::Middle: return "middle";
    case LayerSet::Odd: return "odd";
    case LayerSet::Even: return "even";
  }
  return "?";
}

LayerSet parse_layer_set(const std::string& name) {
  std::string s = name;
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  for (LayerSet set : {LayerSet::Top, LayerSet::Bottom, LayerSet::Middle, LayerSet::Odd, LayerSet::Even})
    if (s == to_string(set)) return set;
  throw std::out_of_range("unknown layer set '" + name + "'");
}

static void check_fraction(double k) {
  if (!(k >= 0.0 && k <= kMaxPruneFraction))
    throw std::out_of_range("prune fraction " + std::to_string(k) + " outside [0, 0.9]");
}

std::size_t heads_to_prune(const ModelConfig& config, double k) {
  check_fraction(k);
  return static_cast<std::size_t>(std::round(k * static_cast<double>(config.total_heads())));
}

HeadMask random_prune(const ModelConfig& config, double k, std::uint64_t seed) {
  const std::size_t n = heads_to_prune(config, k);
  HeadMask mask = HeadMask::all_alive(config);
  std::vector<std::size_t> heads(config.total_heads());
  std::iota(heads.begin(), heads.end(), 0);
  Rng rng(seed);
  // Partial Fisher-Yates: the first n slots are a uniform n-subset.
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(heads.size() - i));
    std::swap(heads[i], heads[j]);
    mask.set(heads[i] / config.n_heads, heads[i] % config.n_heads, false);
  }
  return mask;
}

std::vector<std::size_t> layer_set_indices(std::size_t n_layers, LayerSet set, std::size_t count) {
  auto fail = [&] {
    return std::out_of_range("layer set " + to_string(set) + " cannot select " + std::to_string(count) +
                             " of " + std::to_string(n_layers) + " layers");
  };
  std::vector<std::size_t> out;
  switch (set) {
    case LayerSet::Top:
    case LayerSet::Bottom:
    case LayerSet::Middle: {
      if (count > n_layers) throw fail();
      const std::size_t first = set == LayerSet::Bottom ? 1
                                : set == LayerSet::Top  ? n_layers - count + 1
                                                        : (n_layers - count) / 2 + 1;
      for (std::size_t i = 0; i < count; ++i) out.push_back(first + i);
      break;
    }
    case LayerSet::Odd:
    case LayerSet::Even: {
      const std::size_t first = set == LayerSet::Odd ? 1 : 2;
      for (std::size_t l = first; l <= n_layers && out.size() < count; l += 2) out.push_back(l);
      if (out.size() < count) throw fail();
      break;
    }
  }
  return out;
}

HeadMask layer_prune(const ModelConfig& config, LayerSet set, std::size_t count) {
  HeadMask mask = HeadMask::all_alive(config);
  for (std::size_t l : layer_set_indices(config.n_layers, set, count)) mask.prune_layer(l - 1);
  return mask;
}

MaskStats mask_stats(const HeadMask& mask) {
  MaskStats s;
  s.pruned_count = mask.pruned_count();
  const std::size_t total = mask.n_layers() * mask.n_heads();
  s.pruned_fraction = total ? static_cast<double>(s.pruned_count) / static_cast<double>(total) : 0.0;
  for (std::size_t l = 0; l < mask.n_layers(); ++l) s.per_layer_alive.push_back(mask.alive_in_layer(l));
  return s;
}

void PruningPolicy::validate(const ModelConfig& config) const {
  if (kind == Kind::RandomFraction) check_fraction(fraction);
  else layer_set_indices(config.n_layers, layers, count);
}

HeadMask PruningPolicy::mask(const ModelConfig& config, std::uint64_t seed) const {
  if (kind == Kind::RandomFraction) return random_prune(config, fraction, seed);
  return layer_prune(config, layers, count);
}

bool PruningPolicy::is_identity() const {
  return kind == Kind::RandomFraction ? fraction == 0.0 : count == 0;
}

std::string PruningPolicy::to_string() const {
  if (kind == Kind::LayerSet) return headprune::to_string(layers) + ":" + std::to_string(count);
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, fraction);
  return "random:" + std::string(buf, end);
}

PruningPolicy PruningPolicy::parse(const std::string& text) {
  const auto colon = text.find(':');
  if (colon == std::string::npos) throw std::out_of_range("policy '" + text + "' lacks ':'");
  const std::string head = text.substr(0, colon), tail = text.substr(colon + 1);
  if (head == "random") {
    double k = 0.0;
    auto [ptr, ec] = std::from_chars(tail.data(), tail.data() + tail.size(), k);
    if (ec != std::errc{} || ptr != tail.data() + tail.size())
      throw std::out_of_range("bad prune fraction in '" + text + "'");
    check_fraction(k);
    return random(k);
  }
  std::size_t count = 0;
  auto [ptr, ec] = std::from_chars(tail.data(), tail.data() + tail.size(), count);
  if (ec != std::errc{} || ptr != tail.data() + tail.size())
    throw std::out_of_range("bad layer count in '" + text + "'");
  return layer_set(parse_layer_set(head), count);
}

}  // namespace headprune
