#include <cmath>

#include "diet/error.hpp"
#include "diet/numerics/graph.hpp"
#include "diet/numerics/init.hpp"
#include "doctest.h"
#include "gradcheck.hpp"
#include "primitive_cases.hpp"

using namespace diet;
using num::Tensor;

TEST_CASE("rng: splitmix64 reference vector and stream determinism") {
  std::uint64_t state = 1234567;
  CHECK(num::splitmix64(state) == 6457827717110365317ULL);
  CHECK(num::splitmix64(state) == 3203168211198807973ULL);

  num::Rng a(42), b(42), c(43);
  bool differs = false;
  for (int i = 0; i < 1000; ++i) {
    const auto x = a.next_u64();
    CHECK(x == b.next_u64());
    differs |= x != c.next_u64();
  }
  CHECK(differs);
}

TEST_CASE("rng: bounded draws and uniform range") {
  num::Rng rng(7);
  std::vector<int> counts(6, 0);
  for (int i = 0; i < 60000; ++i) {
    const double u = rng.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    ++counts[rng.below(6)];
  }
  for (int c : counts) CHECK(std::abs(c - 10000) < 400);
  CHECK_THROWS_AS(rng.below(0), std::invalid_argument);
}

TEST_CASE("forward_eval: identity, matmul and softmax examples") {
  num::Graph g;
  const auto x = g.input("x");
  const Tensor xv({3}, {1, 2, 3});
  num::Bindings b;
  b.bind("x", xv);
  CHECK(num::forward_eval(g, b).value(x).bitwise_equal(xv));

  num::Graph mg;
  const auto a = mg.input("a");
  const auto bb = mg.input("b");
  const auto y = mg.matmul(a, bb);
  const Tensor av({2, 2}, {1, 2, 3, 4});
  const Tensor bv({2, 1}, {1, 1});
  num::Bindings mb;
  mb.bind("a", av).bind("b", bv);
  const Tensor out = num::forward_eval(mg, mb).value(y);
  CHECK(out.shape() == num::Shape{2, 1});
  CHECK(out[0] == 3.0);
  CHECK(out[1] == 7.0);

  num::Graph sg;
  const auto s = sg.softmax_rows(sg.input("z"));
  const Tensor zv({1, 2}, {0, 0});
  num::Bindings sb;
  sb.bind("z", zv);
  const Tensor sm = num::forward_eval(sg, sb).value(s);
  CHECK(sm[0] == 0.5);
  CHECK(sm[1] == 0.5);
}

TEST_CASE("forward_eval: errors for shape mismatch, unbound leaf, non-finite values") {
  num::Graph g;
  const auto y = g.matmul(g.input("a"), g.input("b"));
  const Tensor a({2, 3}, 1.0), b({2, 2}, 1.0);
  num::Bindings bind;
  bind.bind("a", a);
  CHECK_THROWS_AS(num::forward_eval(g, bind), ShapeError);
  bind.bind("b", b);
  CHECK_THROWS_AS(num::forward_eval(g, bind), ShapeError);
  (void)y;

  num::Graph big;
  const auto x = big.input("x");
  big.scale(big.scale(x, 1e200), 1e200);
  const Tensor xv({1}, {1.0});
  num::Bindings bx;
  bx.bind("x", xv);
  CHECK_THROWS_AS(num::forward_eval(big, bx), NumericError);

  const Tensor nan_v({1}, {std::nan("")});
  num::Bindings bn;
  bn.bind("x", nan_v);
  CHECK_THROWS_AS(num::forward_eval(big, bn), NumericError);
}

TEST_CASE("backward_pass: identity and hand-computed matmul gradient") {
  num::Graph g;
  const auto x = g.input("x");
  const Tensor xv({3}, {1, 2, 3});
  num::Bindings b;
  b.bind("x", xv);
  const auto exec = num::forward_eval(g, b);
  const num::Seed seed{x, Tensor({3}, {0.5, -1, 2})};
  const auto grads = num::backward_pass(exec, std::span(&seed, 1));
  CHECK(grads["x"].bitwise_equal(seed.grad));

  // C = A B with A = [[1,2],[3,4]], B = [[5,6],[7,8]]; dL/dA = G B^T.
  num::Graph mg;
  const auto c = mg.matmul(mg.param("A"), mg.input("B"));
  const Tensor A({2, 2}, {1, 2, 3, 4}), B({2, 2}, {5, 6, 7, 8});
  num::Bindings mb;
  mb.bind("A", A).bind("B", B);
  const auto mexec = num::forward_eval(mg, mb);
  const num::Seed mseed{c, Tensor({2, 2}, {1, 0, 0, 1})};
  const auto mgrads = num::backward_pass(mexec, std::span(&mseed, 1));
  CHECK(mgrads["A"].bitwise_equal(Tensor({2, 2}, {5, 7, 6, 8})));
  // dL/dB = A^T G.
  CHECK(mgrads["B"].bitwise_equal(Tensor({2, 2}, {1, 3, 2, 4})));

  const num::Seed bad{c, Tensor({2, 1}, 1.0)};
  CHECK_THROWS_AS(num::backward_pass(mexec, std::span(&bad, 1)), ShapeError);
}

TEST_CASE("backward_pass: unreached params get zero gradients") {
  num::Graph g;
  const auto used = g.param("used");
  g.param("unused");
  const auto loss = g.reduce_sum(g.scale(used, 3.0));
  const Tensor u({2}, {1, 1}), v({4}, 9.0);
  num::Bindings b;
  b.bind("used", u).bind("unused", v);
  const auto grads = num::backward_scalar(num::forward_eval(g, b), loss);
  CHECK(grads["used"].bitwise_equal(Tensor({2}, {3, 3})));
  CHECK(grads["unused"].bitwise_equal(Tensor({4}, 0.0)));
}

TEST_CASE("gradient check: every primitive against central differences") {
  num::Rng rng(2024);
  auto cases = testing::primitive_cases(rng);
  for (auto& c : cases) {
    CAPTURE(c.name);
    const auto result = testing::grad_check(c.graph, c.loss, c.values, c.leaves, 1e-5);
    CHECK(result.checked > 0);
    CHECK(result.worst_relative < 1e-6);
  }
}

TEST_CASE("gradient check: random five-op composite graph") {
  num::Rng rng(99);
  for (int trial = 0; trial < 5; ++trial) {
    num::Graph g;
    const auto x = g.param("x");
    const auto w = g.param("w");
    const auto b = g.param("b");
    auto h = g.matmul(x, w);
    h = g.add(h, b);
    h = g.tanh(h);
    h = g.softmax_rows(h);
    const auto loss = g.reduce_sum(g.mul(h, g.input("probe")));
    std::map<std::string, Tensor> values{{"x", testing::random_tensor({3, 4}, rng)},
                                         {"w", testing::random_tensor({4, 5}, rng)},
                                         {"b", testing::random_tensor({5}, rng)},
                                         {"probe", testing::random_tensor({3, 5}, rng)}};
    const auto r = testing::grad_check(g, loss, values, {"x", "w", "b"});
    CHECK(r.worst_relative < 1e-6);
  }
}

TEST_CASE("custom-grad with identity backward passes upstream through unchanged") {
  auto ste = std::make_shared<num::CustomGrad>(num::CustomGrad{
      "sign", [](const Tensor& x) {
        Tensor y(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0 ? 1.0 : 0.0;
        return y;
      },
      [](const Tensor& up, const Tensor&, const Tensor&) { return up; }});
  num::Graph g;
  const auto s = g.input("s");
  const auto y = g.custom(s, ste);
  num::Rng rng(5);
  const Tensor sv = testing::random_tensor({4, 6}, rng);
  num::Bindings b;
  b.bind("s", sv);
  const auto exec = num::forward_eval(g, b);
  const num::Seed seed{y, testing::random_tensor({4, 6}, rng)};
  CHECK(num::backward_pass(exec, std::span(&seed, 1))["s"].bitwise_equal(seed.grad));
}

TEST_CASE("forward_eval is referentially transparent") {
  num::Rng rng(11);
  auto cases = testing::primitive_cases(rng);
  for (auto& c : cases) {
    num::Bindings b;
    for (auto& [k, v] : c.values) b.bind(k, v);
    const auto e1 = num::forward_eval(c.graph, b);
    const auto e2 = num::forward_eval(c.graph, b);
    for (num::NodeId i = 0; i < c.graph.size(); ++i) CHECK(e1.value(i).bitwise_equal(e2.value(i)));
  }
}

TEST_CASE("causal attention masks future and padded keys") {
  num::Graph g;
  const auto out = g.causal_attention(g.input("q"), g.input("k"), g.input("v"), g.input("valid"), 1);
  const Tensor q({1, 3, 1}, {0, 0, 0}), v({1, 3, 1}, {10, 20, 30}), valid({1, 3}, {0, 1, 1});
  num::Bindings b;
  b.bind("q", q).bind("k", q).bind("v", v).bind("valid", valid);
  const Tensor y = num::forward_eval(g, b).value(out);
  CHECK(y[0] == 0.0);             // no valid key at or before position 0
  CHECK(y[1] == doctest::Approx(20.0));
  CHECK(y[2] == doctest::Approx(25.0));  // uniform over positions 1 and 2
}

TEST_CASE("init_xavier_normal: variance and determinism") {
  auto sample_std = [](const num::Shape& shape, std::size_t draws, std::uint64_t seed) {
    num::Rng rng(seed);
    double sum = 0.0, sq = 0.0;
    std::size_t n = 0;
    while (n < draws) {
      const Tensor t = num::init_xavier_normal(shape, rng);
      for (double v : t.data()) {
        sum += v;
        sq += v * v;
        ++n;
      }
    }
    const double mean = sum / static_cast<double>(n);
    return std::sqrt(sq / static_cast<double>(n) - mean * mean);
  };
  CHECK(std::abs(sample_std({1, 1}, 100000, 1) - 1.0) < 0.02);
  CHECK(std::abs(sample_std({64, 64}, 100000, 2) / 0.125 - 1.0) < 0.05);

  num::Rng r1(3), r2(3);
  CHECK(num::init_xavier_normal({5, 7}, r1).bitwise_equal(num::init_xavier_normal({5, 7}, r2)));
  num::Rng r3(3);
  CHECK_THROWS_AS(num::init_xavier_normal({5}, r3), ShapeError);
  CHECK_THROWS_AS(num::init_xavier_normal({0, 3}, r3), ShapeError);
}
