#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "doctest.h"
#include "gradcheck.hpp"
#include "op_cases.hpp"
#include "headprune/adam.hpp"
#include "headprune/rng.hpp"
#include "headprune/tape.hpp"

using namespace headprune;
using headprune::testing::grad_check;
using headprune::testing::random_op_cases;

TEST_CASE("matmul: identity and hand arithmetic") {
  Rng rng(1);
  Tape t(false);
  const Tensor m = Tensor::randn({3, 4}, rng);
  Var out = ops::matmul(t, t.constant(Tensor::identity(3)), t.constant(m));
  CHECK(t.value(out) == m);

  Var small = ops::matmul(t, t.constant(Tensor::matrix({{1, 2}, {3, 4}})),
                          t.constant(Tensor::matrix({{5}, {6}})));
  CHECK(t.value(small) == Tensor::matrix({{17}, {39}}));
}

TEST_CASE("matmul: dimension mismatch is a shape error") {
  Tape t;
  Var a = t.constant(Tensor({2, 3}));
  Var b = t.constant(Tensor({2, 3}));
  CHECK_THROWS_AS(ops::matmul(t, a, b), ShapeError);
}

TEST_CASE("matmul: gradient matches central differences") {
  Rng rng(2);
  auto r = grad_check([](Tape& t, const std::vector<Var>& v) { return ops::matmul(t, v[0], v[1]); },
                      {Tensor::randn({4, 5}, rng), Tensor::randn({5, 3}, rng)});
  CHECK(r.max_rel_error <= 1e-6);
}

TEST_CASE("softmax_rows: symmetry, shift invariance, large inputs") {
  Tape t(false);
  Var s = ops::softmax_rows(t, t.constant(Tensor::matrix({{0, 0}})));
  CHECK(t.value(s)[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(t.value(s)[1] == doctest::Approx(0.5).epsilon(1e-15));

  Rng rng(3);
  Tensor x = Tensor::randn({5, 7}, rng, 3.0);
  Tensor shifted = x;
  for (std::size_t r = 0; r < 5; ++r)
    for (auto& v : shifted.row(r)) v += 17.25 * static_cast<double>(r + 1);
  const Tensor& a = t.value(ops::softmax_rows(t, t.constant(x)));
  const Tensor& b = t.value(ops::softmax_rows(t, t.constant(shifted)));
  CHECK(max_abs_diff(a, b) < 1e-14);
  for (std::size_t r = 0; r < 5; ++r) {
    double sum = 0.0;
    for (double v : a.row(r)) {
      CHECK(v >= 0.0);
      sum += v;
    }
    CHECK(std::abs(sum - 1.0) <= 1e-9);
  }

  // Long-double closed form: p0 = 1 / (1 + e^-1000).
  const long double tail = std::exp(-1000.0L);
  const double p0 = static_cast<double>(1.0L / (1.0L + tail));
  const double p1 = static_cast<double>(tail / (1.0L + tail));
  const Tensor& big = t.value(ops::softmax_rows(t, t.constant(Tensor::matrix({{1000, 0}}))));
  CHECK(big.all_finite());
  CHECK(big[0] == p0);
  CHECK(big[1] == doctest::Approx(p1));
}

TEST_CASE("softmax_rows: non-finite input is rejected") {
  Tape t;
  Var x = t.constant(Tensor::matrix({{0.0, std::numeric_limits<double>::quiet_NaN()}}));
  CHECK_THROWS_AS(ops::softmax_rows(t, x), NonFiniteError);
}

TEST_CASE("layer_norm: closed-form cases") {
  Tape t(false);
  Var gain = t.constant(Tensor({4}, 1.0));
  Var bias = t.constant(Tensor({4}, 0.0));
  const Tensor& flat = t.value(ops::layer_norm(t, t.constant(Tensor({1, 4}, 3.5)), gain, bias));
  for (double v : flat.values()) CHECK(v == 0.0);

  Var g2 = t.constant(Tensor({2}, 1.0));
  Var b2 = t.constant(Tensor({2}, 0.0));
  const Tensor& pm = t.value(ops::layer_norm(t, t.constant(Tensor::matrix({{1, -1}})), g2, b2));
  // mean 0, variance 1 -> x / sqrt(1 + eps)
  CHECK(pm[0] == doctest::Approx(1.0 / std::sqrt(1.0 + 1e-12)).epsilon(1e-15));
  CHECK(pm[1] == doctest::Approx(-1.0 / std::sqrt(1.0 + 1e-12)).epsilon(1e-15));

  // d == 1 degenerates to the bias.
  Var g1 = t.constant(Tensor({1}, 2.0));
  Var b1 = t.constant(Tensor({1}, 0.75));
  const Tensor& one = t.value(ops::layer_norm(t, t.constant(Tensor::matrix({{5}, {-2}})), g1, b1));
  CHECK(one[0] == 0.75);
  CHECK(one[1] == 0.75);
}

TEST_CASE("layer_norm: gradient matches central differences") {
  Rng rng(4);
  auto r = grad_check(
      [](Tape& t, const std::vector<Var>& v) { return ops::layer_norm(t, v[0], v[1], v[2]); },
      {Tensor::randn({3, 6}, rng), Tensor::randn({6}, rng), Tensor::randn({6}, rng)});
  CHECK(r.max_rel_error <= 1e-4);
}

TEST_CASE("gelu and cross_entropy") {
  CHECK(gelu_value(0.0) == 0.0);
  Tape t;
  Var logits = t.variable(Tensor({2, 3}, 0.25));
  std::vector<int> labels{0, 2};
  Var loss = ops::cross_entropy(t, logits, labels);
  CHECK(t.value(loss)[0] == doctest::Approx(std::log(3.0)).epsilon(1e-14));

  std::vector<int> bad{0, 3};
  CHECK_THROWS_AS(ops::cross_entropy(t, logits, bad), std::out_of_range);
  std::vector<int> negative{-1, 0};
  CHECK_THROWS_AS(ops::cross_entropy(t, logits, negative), std::out_of_range);

  Rng rng(5);
  std::vector<int> ys{1, 0, 2, 2};
  auto r = grad_check(
      [&](Tape& tp, const std::vector<Var>& v) { return ops::cross_entropy(tp, v[0], ys); },
      {Tensor::randn({4, 3}, rng, 2.0)});
  CHECK(r.max_rel_error <= 1e-4);
}

TEST_CASE("tape replays in exact reverse execution order") {
  Rng rng(6);
  Tape t;
  Var x = t.variable(Tensor::randn({3, 4}, rng));
  Var w = t.variable(Tensor::randn({4, 4}, rng));
  Var b = t.variable(Tensor::randn({4}, rng));
  Var h = ops::gelu(t, ops::linear(t, x, w, b));
  Var y = ops::tanh(t, ops::add(t, h, x));
  Var loss = ops::weighted_sum(t, y, Tensor({3, 4}, 1.0));
  t.backward(loss);
  const auto& order = t.last_backward_order();
  REQUIRE(order.size() == 5);
  CHECK(std::is_sorted(order.rbegin(), order.rend()));
  CHECK(order.front() == loss.id);
  CHECK(t.grad(w)->shape() == t.value(w).shape());
  CHECK(t.grad(b)->shape() == t.value(b).shape());
}

TEST_CASE("multi_head_attention: zero head scale zeroes output and gradients") {
  Rng rng(7);
  const ops::AttentionShape shape{2, 3, 2};
  std::vector<std::uint8_t> valid{1, 1, 0, 1, 1, 1};
  std::vector<double> scale{0.0, 1.0};
  Tape t;
  Var q = t.variable(Tensor::randn({6, 4}, rng));
  Var k = t.variable(Tensor::randn({6, 4}, rng));
  Var v = t.variable(Tensor::randn({6, 4}, rng));
  Tensor probs;
  Var out = ops::multi_head_attention(t, q, k, v, shape, valid, scale, &probs);
  for (std::size_t r = 0; r < 6; ++r) {
    CHECK(t.value(out).at(r, 0) == 0.0);
    CHECK(t.value(out).at(r, 1) == 0.0);
  }
  // Probabilities still describe valid distributions; padding keys get zero.
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t h = 0; h < 2; ++h)
      for (std::size_t i = 0; i < 3; ++i) {
        double sum = 0.0;
        for (std::size_t j = 0; j < 3; ++j) sum += probs[((b * 2 + h) * 3 + i) * 3 + j];
        CHECK(std::abs(sum - 1.0) < 1e-12);
      }
  CHECK(probs[((0 * 2 + 1) * 3 + 0) * 3 + 2] == 0.0);

  t.backward(ops::weighted_sum(t, out, Tensor::randn({6, 4}, rng)));
  for (Var x : {q, k, v}) {
    const Tensor& g = *t.grad(x);
    for (std::size_t r = 0; r < 6; ++r) {
      CHECK(g.at(r, 0) == 0.0);
      CHECK(g.at(r, 1) == 0.0);
    }
  }
}

TEST_CASE("adam: zero gradient, closed-form first step, determinism") {
  Rng rng(8);
  Tensor p = Tensor::randn({3, 2}, rng);
  const Tensor before = p;
  AdamState state;
  std::vector<Tensor*> params{&p};
  std::vector<Tensor> zero{Tensor({3, 2})};
  adam_step(params, zero, state, {});
  CHECK(p == before);

  Tensor scalar({1}, 0.5);
  AdamState s2;
  AdamConfig cfg;
  cfg.lr = 0.01;
  std::vector<Tensor*> sp{&scalar};
  for (double g : {0.3, -2.0}) {
    scalar[0] = 0.5;
    s2 = {};
    std::vector<Tensor> grad{Tensor({1}, g)};
    adam_step(sp, grad, s2, cfg);
    const double expected = 0.5 - cfg.lr * g / (std::abs(g) + cfg.eps);
    CHECK(scalar[0] == doctest::Approx(expected).epsilon(1e-15));
    CHECK(std::abs((scalar[0] - 0.5) + cfg.lr * (g > 0 ? 1 : -1)) < 1e-9);
  }

  auto run = [](std::uint64_t seed) {
    Rng r(seed);
    Tensor w = Tensor::randn({4, 4}, r);
    AdamState st;
    std::vector<Tensor*> ps{&w};
    for (int i = 0; i < 25; ++i) {
      std::vector<Tensor> g{Tensor::randn({4, 4}, r)};
      adam_step(ps, g, st, {});
    }
    return w;
  };
  CHECK(run(99) == run(99));

  std::vector<Tensor> wrong{Tensor({2, 2})};
  CHECK_THROWS_AS(adam_step(params, wrong, state, {}), ShapeError);
}

TEST_CASE("every differentiable op passes finite-difference checks on random shapes") {
  Rng rng(2024);
  for (const auto& c : random_op_cases(rng, 20)) {
    const std::string op = c.name;
    CAPTURE(op);
    auto r = grad_check(c.fn, c.inputs);
    CHECK(r.max_rel_error <= 1e-4);
  }
}
