#include <set>

#include "doctest.h"
#include "headprune/pruning.hpp"
#include "headprune/rng.hpp"

using namespace headprune;

namespace {

std::set<std::size_t> pruned_layers(const HeadMask& m) {
  std::set<std::size_t> out;
  for (std::size_t l = 0; l < m.n_layers(); ++l) {
    const auto alive = m.alive_in_layer(l);
    REQUIRE((alive == 0 || alive == m.n_heads()));
    if (alive == 0) out.insert(l + 1);
  }
  return out;
}

}  // namespace

TEST_CASE("random_prune masks exactly round(k * heads)") {
  const ModelConfig c;
  CHECK(random_prune(c, 0.0, 1) == HeadMask::all_alive(c));
  CHECK(random_prune(c, 0.5, 1).pruned_count() == 72);
  CHECK(random_prune(c, 0.9, 1).pruned_count() == 130);
  CHECK(random_prune(c, 0.25, 1).pruned_count() == 36);
  CHECK(random_prune(c, 0.75, 1).pruned_count() == 108);
  for (int i = 0; i <= 9; ++i) {
    const double k = i / 10.0;
    const auto expected = static_cast<std::size_t>(std::floor(k * 144 + 0.5));
    CHECK(random_prune(c, k, 3).pruned_count() == expected);
    CHECK(mask_stats(random_prune(c, k, 3)).pruned_count == expected);
  }
  // Round half away from zero: 0.5 * 5 heads = 2.5 -> 3.
  ModelConfig small;
  small.n_layers = 1;
  small.n_heads = 5;
  small.d_model = 10;
  CHECK(random_prune(small, 0.5, 9).pruned_count() == 3);
  CHECK(heads_to_prune(small, 0.1) == 1);  // 0.5 -> 1
}

TEST_CASE("random_prune is deterministic and seed-sensitive") {
  const ModelConfig c;
  CHECK(random_prune(c, 0.5, 11) == random_prune(c, 0.5, 11));
  CHECK_FALSE(random_prune(c, 0.5, 11) == random_prune(c, 0.5, 12));
}

TEST_CASE("random_prune is uniform over heads (Monte-Carlo)") {
  const ModelConfig c;
  const int draws = 10000;
  std::vector<int> hits(c.total_heads(), 0);
  for (int s = 0; s < draws; ++s) {
    const HeadMask m = random_prune(c, 0.5, derive_seed(2024, "mc", static_cast<std::uint64_t>(s)));
    for (std::size_t l = 0; l < c.n_layers; ++l)
      for (std::size_t h = 0; h < c.n_heads; ++h) hits[l * c.n_heads + h] += m.alive(l, h) ? 0 : 1;
  }
  double worst = 0.0;
  for (int n : hits) worst = std::max(worst, std::abs(n / static_cast<double>(draws) - 0.5));
  CHECK(worst <= 0.02);
}

TEST_CASE("random_prune rejects fractions outside [0, 0.9]") {
  const ModelConfig c;
  CHECK_THROWS_AS(random_prune(c, -0.1, 1), std::out_of_range);
  CHECK_THROWS_AS(random_prune(c, 0.95, 1), std::out_of_range);
  CHECK_THROWS_AS(random_prune(c, std::nan(""), 1), std::out_of_range);
}

TEST_CASE("layer sets on twelve layers match the documented indices") {
  const ModelConfig c;
  using S = std::set<std::size_t>;
  CHECK(pruned_layers(layer_prune(c, LayerSet::Top, 6)) == S{7, 8, 9, 10, 11, 12});
  CHECK(pruned_layers(layer_prune(c, LayerSet::Bottom, 6)) == S{1, 2, 3, 4, 5, 6});
  CHECK(pruned_layers(layer_prune(c, LayerSet::Middle, 6)) == S{4, 5, 6, 7, 8, 9});
  CHECK(pruned_layers(layer_prune(c, LayerSet::Odd, 6)) == S{1, 3, 5, 7, 9, 11});
  CHECK(pruned_layers(layer_prune(c, LayerSet::Even, 6)) == S{2, 4, 6, 8, 10, 12});
  CHECK(pruned_layers(layer_prune(c, LayerSet::Odd, 2)) == S{1, 3});
  CHECK(pruned_layers(layer_prune(c, LayerSet::Even, 1)) == S{2});
  CHECK(layer_prune(c, LayerSet::Bottom, 6).pruned_count() == 72);
  for (LayerSet s : {LayerSet::Top, LayerSet::Bottom, LayerSet::Middle, LayerSet::Odd, LayerSet::Even}) {
    CHECK(layer_prune(c, s, 0) == HeadMask::all_alive(c));
    // Equal counts prune equal head totals.
    CHECK(layer_prune(c, s, 4).pruned_count() == 48);
  }
}

TEST_CASE("middle band and its complement partition the layers") {
  const ModelConfig c;
  auto middle = pruned_layers(layer_prune(c, LayerSet::Middle, 6));
  const std::set<std::size_t> rest{1, 2, 3, 10, 11, 12};
  std::multiset<std::size_t> all(middle.begin(), middle.end());
  all.insert(rest.begin(), rest.end());
  for (std::size_t l = 1; l <= 12; ++l) CHECK(all.count(l) == 1);
  CHECK(all.size() == 12);
}

TEST_CASE("layer_prune rejects impossible selections") {
  const ModelConfig c;
  CHECK_THROWS_AS(layer_prune(c, LayerSet::Top, 13), std::out_of_range);
  CHECK_THROWS_AS(layer_prune(c, LayerSet::Odd, 7), std::out_of_range);
  CHECK_THROWS_AS(layer_prune(c, LayerSet::Even, 7), std::out_of_range);
  CHECK_THROWS_AS(parse_layer_set("sideways"), std::out_of_range);
  CHECK(parse_layer_set("Top") == LayerSet::Top);
}

TEST_CASE("mask_stats summaries") {
  const ModelConfig c;
  const auto full = mask_stats(HeadMask::all_alive(c));
  CHECK(full.pruned_count == 0);
  CHECK(full.pruned_fraction == 0.0);
  const auto top = mask_stats(layer_prune(c, LayerSet::Top, 6));
  CHECK(top.per_layer_alive == std::vector<std::size_t>{12, 12, 12, 12, 12, 12, 0, 0, 0, 0, 0, 0});
  CHECK(top.pruned_fraction == doctest::Approx(0.5));
  CHECK(mask_stats(random_prune(c, 0.9, 5)).pruned_count == 130);
}

TEST_CASE("policy text form round-trips") {
  const ModelConfig c;
  for (const auto& p : {PruningPolicy::random(0.25), PruningPolicy::random(0.9), PruningPolicy::random(0.0),
                        PruningPolicy::layer_set(LayerSet::Middle, 6), PruningPolicy::layer_set(LayerSet::Even, 3)}) {
    CHECK(PruningPolicy::parse(p.to_string()) == p);
    CHECK_NOTHROW(p.validate(c));
  }
  CHECK(PruningPolicy::parse("random:0.5").mask(c, 4) == random_prune(c, 0.5, 4));
  CHECK(PruningPolicy::parse("bottom:6").mask(c, 4) == layer_prune(c, LayerSet::Bottom, 6));
  CHECK(PruningPolicy::random(0.0).is_identity());
  CHECK_THROWS_AS(PruningPolicy::parse("random:1.5"), std::out_of_range);
  CHECK_THROWS_AS(PruningPolicy::parse("random0.5"), std::out_of_range);
  CHECK_THROWS_AS(PruningPolicy::parse("top:x"), std::out_of_range);
  CHECK_THROWS_AS(PruningPolicy::layer_set(LayerSet::Top, 20).validate(c), std::out_of_range);
}
