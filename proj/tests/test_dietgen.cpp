#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>

#include "diet/backbone/backbone_graph.hpp"
#include "diet/dietgen/dietgen.hpp"
#include "diet/error.hpp"
#include "doctest.h"
#include "gradcheck.hpp"

using namespace diet;
using num::Tensor;

namespace {

// Independent top-k oracle: full stable sort by (-|s|, index).
std::vector<std::uint8_t> sort_oracle(const std::vector<double>& s, double keep) {
  const std::size_t n = s.size();
  std::size_t k = static_cast<std::size_t>(std::floor(keep * static_cast<double>(n) + 0.5));
  k = std::max<std::size_t>(1, std::min(k, n));
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return std::abs(s[a]) > std::abs(s[b]); });
  std::vector<std::uint8_t> m(n, 0);
  for (std::size_t i = 0; i < k; ++i) m[idx[i]] = 1;
  return m;
}

Tensor zeros(num::Shape s) { return Tensor(std::move(s), 0.0); }

}  // namespace

TEST_CASE("extract_features: zero GRU is a fixed point at zero") {
  const std::size_t d = 4;
  num::Rng rng(1);
  const Tensor x = testing::random_tensor({3, d}, rng);
  const auto g = gru_features(zeros({3 * d, d}), zeros({3 * d, d}), zeros({3 * d}), zeros({3 * d}), x);
  for (double v : g) CHECK(v == 0.0);
  CHECK_THROWS_AS(gru_features(zeros({3 * d, d}), zeros({3 * d, d}), zeros({3 * d}), zeros({3 * d}), Tensor()), DataError);
}

TEST_CASE("extract_features: one step matches the hand-evaluated GRU cell") {
  const std::size_t d = 3;
  num::Rng rng(2);
  const Tensor wi = testing::random_tensor({3 * d, d}, rng), wh = testing::random_tensor({3 * d, d}, rng);
  const Tensor bi = testing::random_tensor({3 * d}, rng), bh = testing::random_tensor({3 * d}, rng);
  const Tensor x = testing::random_tensor({1, d}, rng);
  const auto got = gru_features(wi, wh, bi, bh, x);
  // h0 = 0: W_h h0 vanishes, leaving the recurrent biases.
  for (std::size_t j = 0; j < d; ++j) {
    auto pre = [&](std::size_t gate) {
      double s = bi[gate * d + j];
      for (std::size_t c = 0; c < d; ++c) s += wi.at(gate * d + j, c) * x[c];
      return s;
    };
    const double r = 1.0 / (1.0 + std::exp(-(pre(0) + bh[j])));
    const double z = 1.0 / (1.0 + std::exp(-(pre(1) + bh[d + j])));
    const double n = std::tanh(pre(2) + r * bh[2 * d + j]);
    CHECK(got[j] == doctest::Approx((1.0 - z) * n).epsilon(1e-14));
  }
}

TEST_CASE("extract_features: order sensitive on a random GRU") {
  const std::size_t d = 5;
  num::Rng rng(3);
  const Tensor wi = testing::random_tensor({3 * d, d}, rng), wh = testing::random_tensor({3 * d, d}, rng);
  const Tensor bi = testing::random_tensor({3 * d}, rng), bh = testing::random_tensor({3 * d}, rng);
  const Tensor x = testing::random_tensor({3, d}, rng);
  Tensor rev({3, d});
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t c = 0; c < d; ++c) rev.at(t, c) = x.at(2 - t, c);
  CHECK(gru_features(wi, wh, bi, bh, x) != gru_features(wi, wh, bi, bh, rev));
}

TEST_CASE("element_scores: affine degenerate case, matmul oracle, personalization") {
  num::Rng rng(4);
  const Tensor b = testing::random_tensor({6}, rng);
  const std::vector<double> g{0.3, -0.2, 0.9};
  const auto s0 = element_scores(zeros({3, 6}), b, g);
  CHECK(std::equal(s0.begin(), s0.end(), b.data().begin()));

  const Tensor w = testing::random_tensor({3, 6}, rng);
  const auto s = element_scores(w, b, g);
  for (std::size_t j = 0; j < 6; ++j) {
    double o = b[j];
    for (std::size_t k = 0; k < 3; ++k) o += g[k] * w.at(k, j);
    CHECK(s[j] == doctest::Approx(o).epsilon(1e-14));
  }
  CHECK(element_scores(w, b, std::vector<double>{0.1, 0.1, 0.1}) != s);
  CHECK_THROWS_AS(element_scores(w, b, std::vector<double>{1.0}), ShapeError);
}

TEST_CASE("row_importance: softmax closed forms and simplex property") {
  const std::vector<double> g{1.0};
  const auto half = row_importance(zeros({1, 2}), zeros({2}), g);
  CHECK(half[0] == 0.5);
  CHECK(half[1] == 0.5);
  const auto third = row_importance(zeros({1, 2}), Tensor({2}, {std::log(1.0), std::log(2.0)}), g);
  CHECK(third[0] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK(third[1] == doctest::Approx(2.0 / 3.0).epsilon(1e-15));

  num::Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor w = testing::random_tensor({4, 16}, rng, 3.0);
    const Tensor b = testing::random_tensor({16}, rng, 3.0);
    const std::vector<double> gv{rng.uniform(), rng.uniform(), -rng.uniform(), rng.uniform()};
    const auto r = row_importance(w, b, gv);
    double total = 0.0;
    for (double v : r) {
      CHECK(v > 0.0);
      CHECK(v < 1.0);
      total += v;
    }
    CHECK(std::abs(total - 1.0) < 1e-12);
  }
  CHECK_THROWS_AS(row_importance(zeros({2, 2}), zeros({2}), g), ShapeError);
}

TEST_CASE("correct_scores: worked examples") {
  const auto c = correct_scores(std::vector<double>{1, 2, 3, 4}, 2, 2, std::vector<double>{0.5, 0.5});
  CHECK(c == std::vector<double>{0.5, 1, 1.5, 2});

  const auto skew = correct_scores(std::vector<double>{9, 9, 1, 1}, 2, 2, std::vector<double>{0.001, 0.999});
  CHECK(binarize_topk(skew, 0.5) == std::vector<std::uint8_t>{0, 0, 1, 1});
  CHECK_THROWS_AS(correct_scores(std::vector<double>{1, 2}, 1, 2, std::vector<double>{1, 1}), ShapeError);
}

TEST_CASE("uniform row importance preserves the kept set") {
  num::Rng rng(6);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t rows = 1 + rng.below(8), cols = 1 + rng.below(8);
    std::vector<double> s(rows * cols);
    for (double& v : s) v = static_cast<double>(static_cast<int>(rng.below(9)) - 4);  // many ties
    const std::vector<double> r(rows, 1.0 / static_cast<double>(rows));
    const double keep = 0.05 + 0.95 * rng.uniform();
    CHECK(binarize_topk(correct_scores(s, rows, cols, r), keep) == binarize_topk(s, keep));
  }
}

TEST_CASE("binarize_topk: examples and the sort-threshold oracle") {
  CHECK(binarize_topk(std::vector<double>{0.5, -0.9, 0.1, 0.3}, 0.5) == std::vector<std::uint8_t>{1, 1, 0, 0});
  CHECK(binarize_topk(std::vector<double>{0.0, 0.0, 0.0}, 1.0) == std::vector<std::uint8_t>{1, 1, 1});
  CHECK(binarize_topk(std::vector<double>{2, -2, 2, 1}, 0.5) == std::vector<std::uint8_t>{1, 1, 0, 0});
  CHECK_THROWS_AS(binarize_topk(std::vector<double>{}, 0.5), ShapeError);
  CHECK_THROWS_AS(binarize_topk(std::vector<double>{1.0}, 0.0), ConfigError);

  num::Rng rng(7);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng.below(300);
    std::vector<double> s(n);
    const bool tied = trial % 2 == 0;
    for (double& v : s) v = tied ? static_cast<double>(static_cast<int>(rng.below(7)) - 3) : rng.normal();
    const double keep = trial % 10 == 0 ? 1.0 : 0.01 + 0.99 * rng.uniform();
    const auto m = binarize_topk(s, keep);
    CHECK(m == sort_oracle(s, keep));
    CHECK(static_cast<std::size_t>(std::count(m.begin(), m.end(), 1)) == keep_count(n, keep));
  }
}

TEST_CASE("ste_backward and the graph straight-through rule agree exactly") {
  num::Rng rng(8);
  const std::vector<double> w{0.3, -1.2, 0.7, 2.0};
  CHECK(ste_backward(std::vector<double>(4, 1.0), w) == w);
  CHECK_THROWS_AS(ste_backward(std::vector<double>(3, 1.0), w), ShapeError);

  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 2 + rng.below(50);
    num::Graph g;
    const auto s = g.input("s");
    const auto wn = g.input("w");
    const auto eff = g.mul(g.custom(s, topk_ste(0.3)), wn);
    const Tensor sv = testing::random_tensor({1, n}, rng), wv = testing::random_tensor({1, n}, rng);
    num::Bindings b;
    b.bind("s", sv).bind("w", wv);
    const auto exec = num::forward_eval(g, b);
    const num::Seed seed{eff, testing::random_tensor({1, n}, rng)};
    const auto grads = num::backward_pass(exec, std::span(&seed, 1));
    const auto expect = ste_backward(seed.grad.data(), wv.data());
    const auto mask = exec.value(g.node(eff).inputs[0]);
    bool dropped_has_grad = false;
    for (std::size_t i = 0; i < n; ++i) {
      CHECK(grads["s"][i] == expect[i]);
      dropped_has_grad |= mask[i] == 0.0 && grads["s"][i] != 0.0;
    }
    CHECK(dropped_has_grad);
  }
}

TEST_CASE("hypernet gradient through the straight-through mask matches the hand chain rule") {
  // 2x2 layer, d = 2, no correction: S = g W + b, W' = F(S) ⊙ w,
  // L = sum(W' ⊙ P). Then dL/dW[k, j] = g[k] P[j] w[j] and dL/db[j] = P[j] w[j].
  num::Graph g;
  const auto gin = g.input("g");
  const auto W = g.param("W");
  const auto bias = g.param("b");
  const auto s = g.add(g.matmul(gin, W), bias);
  const auto eff = g.mul(g.custom(s, topk_ste(0.5)), g.input("w"));
  const auto loss = g.reduce_sum(g.mul(eff, g.input("P")));
  const Tensor gv({1, 2}, {0.7, -1.3}), Wv({2, 4}, {0.1, -0.4, 0.25, 0.9, -0.6, 0.3, 0.8, -0.2});
  const Tensor bv({4}, {0.05, -0.1, 0.0, 0.2}), wv({1, 4}, {1.5, -0.5, 0.25, 2.0}), Pv({1, 4}, {0.3, 1.1, -0.7, 0.4});
  num::Bindings bind;
  bind.bind("g", gv).bind("W", Wv).bind("b", bv).bind("w", wv).bind("P", Pv);
  const auto grads = num::backward_scalar(num::forward_eval(g, bind), loss);
  for (std::size_t k = 0; k < 2; ++k)
    for (std::size_t j = 0; j < 4; ++j)
      CHECK(grads["W"].at(k, j) == doctest::Approx(gv[k] * Pv[j] * wv[j]).epsilon(1e-15));
  for (std::size_t j = 0; j < 4; ++j) CHECK(grads["b"][j] == doctest::Approx(Pv[j] * wv[j]).epsilon(1e-15));
}

TEST_CASE("generate_diet: determinism, cardinality, keep-all identity") {
  for (Arch arch : {Arch::SASRec, Arch::Caser}) {
    num::Rng rng(9);
    const auto bb = build_backbone(arch, 40, {}, rng);
    const auto stack = build_generator_stack(bb, 0.2, true, rng);
    const Sequence seq{3, 17, 5, 22, 9, 1, 30};
    const Diet a = generate_diet(stack, seq, bb);
    CHECK(a == generate_diet(stack, seq, bb));
    for (std::size_t i = 0; i < a.layers.size(); ++i) CHECK(a.layers[i].popcount() == keep_count(bb.layers[i].size(), 0.2));
    CHECK_NOTHROW(apply_diet(bb, a));
    CHECK(a != generate_diet(stack, Sequence{1, 2, 3}, bb));

    auto full = build_generator_stack(bb, 1.0, true, rng);
    const Diet all = generate_diet(full, seq, bb);
    CHECK(all == full_diet(bb));
    CHECK(forward_scores(apply_diet(bb, all), seq) == forward_scores(apply_diet(bb, full_diet(bb)), seq));
    CHECK_THROWS_AS(generate_diet(stack, Sequence{}, bb), DataError);
  }
}

TEST_CASE("generator graph matches the direct diet generation") {
  for (bool correction : {false, true}) {
    num::Rng rng(10);
    const auto bb = build_backbone(Arch::SASRec, 30, {}, rng);
    const auto stack = build_generator_stack(bb, 0.1, correction, rng);
    const std::vector<Sequence> seqs{{1}, {2, 3}, {4, 5, 6, 7, 8, 9, 10}, {11, 12, 13}};

    num::Graph g;
    const auto E = g.input("item_embedding");
    const auto ids = g.input(kIdsInput);
    const auto valid = g.input(kValidInput);
    std::vector<num::NodeId> w;
    for (const auto& l : bb.layers) w.push_back(g.input("w." + l.name));
    const auto nodes = add_generator_graph(g, stack, g.gather(E, ids), valid, w);

    num::Bindings bind;
    bind.bind("item_embedding", bb.item_embedding());
    const auto batch = make_sequence_batch(std::span<const Sequence>(seqs), bb.hyper.max_len);
    batch.bind(bind);
    std::vector<Tensor> wt;
    for (const auto& l : bb.layers) wt.emplace_back(num::Shape{1, l.size()}, std::vector<double>(l.weights().begin(), l.weights().end()));
    for (std::size_t i = 0; i < bb.layers.size(); ++i) bind.bind("w." + bb.layers[i].name, wt[i]);
    for (const auto& [name, t] : stack.params) bind.bind(name, t);
    const auto exec = num::forward_eval(g, bind);

    for (std::size_t b = 0; b < seqs.size(); ++b) {
      const Diet diet = generate_diet(stack, seqs[b], bb);
      const Tensor x = window_embeddings(bb, seqs[b]);
      for (std::size_t i = 0; i < bb.layers.size(); ++i) {
        const std::size_t n = bb.layers[i].size();
        const auto feat = extract_features(stack, i, x);
        auto s = element_scores(stack.param(i, "elem.w"), stack.param(i, "elem.b"), feat);
        if (correction)
          s = correct_scores(s, bb.layers[i].rows, bb.layers[i].cols,
                             row_importance(stack.param(i, "row.w"), stack.param(i, "row.b"), feat));
        const Tensor& gs = exec.value(nodes.scores[i]);
        const Tensor& gm = exec.value(nodes.masks[i]);
        double worst = 0.0;
        std::size_t mismatched = 0;
        for (std::size_t j = 0; j < n; ++j) {
          worst = std::max(worst, std::abs(gs[b * n + j] - s[j]));
          mismatched += static_cast<std::uint8_t>(gm[b * n + j]) != diet.layers[i].bits[j];
        }
        CHECK(worst < 1e-12);
        CHECK(mismatched == 0);
      }
    }
  }
}

TEST_CASE("fused generator head matches the primitive chain in values and gradients") {
  for (bool correction : {false, true}) {
    num::Rng rng(21);
    const auto bb = build_backbone(Arch::SASRec, 30, {}, rng);
    const auto stack = build_generator_stack(bb, 0.2, correction, rng);
    const std::vector<Sequence> seqs{{1, 2}, {3, 4, 5, 6}, {7}};
    const auto batch = make_sequence_batch(std::span<const Sequence>(seqs), bb.hyper.max_len);

    std::vector<Tensor> probe;
    for (const auto& l : bb.layers) {
      Tensor t({seqs.size(), l.size()});
      for (double& v : t.data()) v = rng.uniform() - 0.5;
      probe.push_back(std::move(t));
    }
    auto run = [&](bool fused) {
      num::Graph g;
      const auto E = g.input("item_embedding");
      std::vector<num::NodeId> w;
      for (const auto& l : bb.layers) w.push_back(g.input("w." + l.name));
      const auto nodes =
          add_generator_graph(g, stack, g.gather(E, g.input(kIdsInput)), g.input(kValidInput), w, fused);
      std::optional<num::NodeId> loss;
      for (std::size_t i = 0; i < bb.layers.size(); ++i) {
        const auto term = g.reduce_sum(g.mul(nodes.effective[i], g.input("probe" + std::to_string(i))));
        loss = loss ? g.add(*loss, term) : term;
      }
      num::Bindings bind;
      bind.bind("item_embedding", bb.item_embedding());
      batch.bind(bind);
      std::vector<Tensor> wt;
      for (const auto& l : bb.layers)
        wt.emplace_back(num::Shape{1, l.size()}, std::vector<double>(l.weights().begin(), l.weights().end()));
      for (std::size_t i = 0; i < bb.layers.size(); ++i) {
        bind.bind("w." + bb.layers[i].name, wt[i]);
        bind.bind("probe" + std::to_string(i), probe[i]);
      }
      for (const auto& [name, t] : stack.params) bind.bind(name, t);
      const auto exec = num::forward_eval(g, bind);
      std::vector<Tensor> eff;
      for (auto id : nodes.effective) eff.push_back(exec.value(id));
      return std::make_pair(eff, num::backward_scalar(exec, *loss).all());
    };
    const auto [plain_eff, plain_grad] = run(false);
    const auto [fused_eff, fused_grad] = run(true);
    for (std::size_t i = 0; i < plain_eff.size(); ++i) CHECK(plain_eff[i].bitwise_equal(fused_eff[i]));
    REQUIRE(plain_grad.size() == fused_grad.size());
    for (const auto& [name, gp] : plain_grad) {
      const Tensor& gf = fused_grad.at(name);
      REQUIRE(gf.size() == gp.size());
      double worst = 0.0, scale = 0.0;
      for (std::size_t j = 0; j < gp.size(); ++j) {
        worst = std::max(worst, std::abs(gp[j] - gf[j]));
        scale = std::max(scale, std::abs(gp[j]));
      }
      INFO(name);
      CHECK(worst <= 1e-12 * std::max(1.0, scale));
    }
  }
}

TEST_CASE("dieting_bind: prefix aliasing") {
  num::Rng rng(11);
  const auto caser = build_backbone(Arch::Caser, 10, {}, rng);
  auto shared = make_dieting_backbone(caser, rng);
  const auto& buf = *shared.layers.front().storage;
  CHECK(buf.size() == caser.largest_layer());
  for (const auto& l : shared.layers) {
    CHECK(l.storage.get() == &buf);
    CHECK(std::equal(l.weights().begin(), l.weights().end(), buf.begin()));
  }
  (*shared.layers.front().storage)[0] = 7.0;
  for (const auto& l : shared.layers) CHECK(l.weights()[0] == 7.0);

  auto sas = make_dieting_backbone(build_backbone(Arch::SASRec, 10, {}, rng), rng);
  const Diet d = full_diet(sas);
  const auto mb = apply_diet(sas, d);
  for (std::size_t i = 1; i < sas.layers.size(); ++i) {
    const auto a = mb.effective(0), b = mb.effective(i);
    CHECK(std::equal(a.begin(), a.end(), b.begin()));
  }

  auto small = std::make_shared<std::vector<double>>(10, 0.0);
  CHECK_THROWS_AS(dieting_bind(small, sas), ShapeError);
}
