#include <cmath>

#include "diet/backbone/backbone_graph.hpp"
#include "diet/backbone/checkpoint.hpp"
#include "diet/error.hpp"
#include "doctest.h"

using namespace diet;
using num::Tensor;

namespace {

Diet random_diet(const BackboneParams& bb, double keep, num::Rng& rng) {
  Diet d;
  d.keep_ratio = keep;
  for (const auto& l : bb.layers) {
    const std::size_t k = keep_count(l.size(), keep);
    std::vector<std::size_t> order(l.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(std::span(order));
    LayerMask m{l.name, l.rows, l.cols, k, std::vector<std::uint8_t>(l.size(), 0)};
    for (std::size_t i = 0; i < k; ++i) m.bits[order[i]] = 1;
    d.layers.push_back(std::move(m));
  }
  return d;
}

Sequence random_sequence(std::size_t len, std::size_t n_items, num::Rng& rng) {
  Sequence s(len);
  for (auto& x : s) x = static_cast<ItemId>(rng.below(n_items));
  return s;
}

// Scores for a batch through the autodiff graph, with effective weights bound
// as per-sample [B, n] inputs.
std::vector<std::vector<double>> graph_scores(const MaskedBackbone& mb, const std::vector<Sequence>& seqs) {
  const auto& bb = mb.backbone();
  num::Graph g;
  std::vector<num::NodeId> w;
  for (const auto& l : bb.layers) w.push_back(g.input("w." + l.name));
  const auto dense = add_dense_leaves(g, bb, nullptr);
  const auto io = build_backbone_graph(g, bb, w, dense);
  const auto scores = g.matmul(io.hidden, io.item_embedding, true);

  const std::size_t B = seqs.size();
  std::vector<Tensor> weights;
  for (std::size_t i = 0; i < bb.layers.size(); ++i) {
    const auto eff = mb.effective(i);
    Tensor t({B, eff.size()});
    for (std::size_t b = 0; b < B; ++b) std::copy(eff.begin(), eff.end(), t.data().begin() + b * eff.size());
    weights.push_back(std::move(t));
  }
  num::Bindings bind;
  for (std::size_t i = 0; i < bb.layers.size(); ++i) bind.bind("w." + bb.layers[i].name, weights[i]);
  bind_dense(bind, bb);
  const auto batch = make_sequence_batch(std::span<const Sequence>(seqs), bb.hyper.max_len);
  batch.bind(bind);
  const Tensor out = num::forward_eval(g, bind).value(scores);
  std::vector<std::vector<double>> rows(B);
  for (std::size_t b = 0; b < B; ++b)
    rows[b].assign(out.data().begin() + b * bb.n_items, out.data().begin() + (b + 1) * bb.n_items);
  return rows;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  REQUIRE(a.size() == b.size());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_CASE("build_backbone: SASRec registry has 12 square linear layers in block order") {
  num::Rng rng(1);
  const auto bb = build_backbone(Arch::SASRec, 50, {}, rng);
  REQUIRE(bb.layers.size() == 12);
  const char* expect[] = {"attn.q", "attn.k", "attn.v", "attn.o", "ffn.1", "ffn.2"};
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t j = 0; j < 6; ++j) {
      const auto& l = bb.layers[b * 6 + j];
      CHECK(l.name == "block" + std::to_string(b) + "." + expect[j]);
      CHECK(l.kind == LayerKind::Linear);
      CHECK(l.rows == 64);
      CHECK(l.cols == 64);
    }
  CHECK(bb.maskable_count() == 12 * 4096);
  CHECK(bb.item_embedding().shape() == num::Shape{50, 64});
  CHECK(bb.dense.count("position_embedding") == 1);
  CHECK(bb.dense.count("final_ln.gamma") == 1);

  num::Rng bad(1);
  BackboneHyper h;
  h.heads = 5;
  CHECK_THROWS_AS(build_backbone(Arch::SASRec, 50, h, bad), ConfigError);
  CHECK_THROWS_AS(build_backbone(Arch::SASRec, 0, {}, bad), ConfigError);
}

TEST_CASE("build_backbone: Caser registry holds conv kernels then the fully-connected layer") {
  num::Rng rng(2);
  const auto bb = build_backbone(Arch::Caser, 30, {}, rng);
  REQUIRE(bb.layers.size() == 6);
  for (std::size_t h = 1; h <= 4; ++h) {
    CHECK(bb.layers[h - 1].name == "conv_h" + std::to_string(h));
    CHECK(bb.layers[h - 1].kind == LayerKind::ConvHorizontal);
    CHECK(bb.layers[h - 1].rows == 4);
    CHECK(bb.layers[h - 1].cols == h * 64);
  }
  CHECK(bb.layers[4].name == "conv_v");
  CHECK(bb.layers[4].kind == LayerKind::ConvVertical);
  CHECK(bb.layers[4].rows == 16);
  CHECK(bb.layers[4].cols == 5);
  CHECK(bb.layers[5].name == "fc");
  CHECK(bb.layers[5].rows == 64);
  CHECK(bb.layers[5].cols == 16 * 64 + 16);
}

TEST_CASE("build_backbone: same seed gives bitwise identical parameters") {
  for (Arch arch : {Arch::SASRec, Arch::Caser}) {
    num::Rng a(77), b(77), c(78);
    const auto x = build_backbone(arch, 40, {}, a);
    const auto y = build_backbone(arch, 40, {}, b);
    const auto z = build_backbone(arch, 40, {}, c);
    CHECK(bitwise_equal(x, y));
    CHECK_FALSE(bitwise_equal(x, z));
  }
}

TEST_CASE("copying a backbone is deep") {
  num::Rng rng(3);
  const auto bb = build_backbone(Arch::SASRec, 20, {}, rng);
  BackboneParams copy = bb;
  CHECK(bitwise_equal(bb, copy));
  copy.layers[0].mutable_weights()[0] += 1.0;
  CHECK_FALSE(bitwise_equal(bb, copy));
}

TEST_CASE("apply_diet: identity, annihilator and elementwise product") {
  num::Rng rng(4);
  BackboneHyper h;
  h.max_len = 3;
  h.vert_filters = 3;
  h.max_horiz_height = 3;
  const auto bb = build_backbone(Arch::Caser, 10, h, rng);
  const std::size_t iv = bb.layer_index("conv_v");
  REQUIRE(bb.layers[iv].size() == 9);

  const auto ones = apply_diet(bb, full_diet(bb));
  for (std::size_t i = 0; i < bb.layers.size(); ++i) {
    const auto w = bb.layers[i].weights();
    const auto e = ones.effective(i);
    CHECK(std::equal(w.begin(), w.end(), e.begin()));
  }

  Diet zeros = full_diet(bb);
  for (auto& m : zeros.layers) std::fill(m.bits.begin(), m.bits.end(), 0);
  CHECK_THROWS_AS(apply_diet(bb, zeros), ShapeError);
  const auto dead = apply_diet(bb, zeros, false);
  for (std::size_t i = 0; i < bb.layers.size(); ++i)
    for (double v : dead.effective(i)) CHECK(v == 0.0);

  const Diet rd = random_diet(bb, 0.4, rng);
  const auto mb = apply_diet(bb, rd);
  const auto w = bb.layers[iv].weights();
  for (std::size_t j = 0; j < 9; ++j) CHECK(mb.effective(iv)[j] == w[j] * rd.layers[iv].bits[j]);

  Diet wrong = rd;
  wrong.layers[0].bits.pop_back();
  CHECK_THROWS_AS(apply_diet(bb, wrong, false), ShapeError);
}

TEST_CASE("forward_scores agrees with the autodiff graph on random masked backbones") {
  for (Arch arch : {Arch::SASRec, Arch::Caser}) {
    CAPTURE(arch_name(arch));
    num::Rng rng(5);
    const auto bb = build_backbone(arch, 37, {}, rng);
    const Diet diet = random_diet(bb, 0.3, rng);
    const auto mb = apply_diet(bb, diet);
    std::vector<Sequence> seqs;
    for (std::size_t len = 1; len <= 9; ++len) seqs.push_back(random_sequence(len, bb.n_items, rng));
    const auto via_graph = graph_scores(mb, seqs);
    for (std::size_t i = 0; i < seqs.size(); ++i) {
      const auto direct = forward_scores(mb, seqs[i]);
      CHECK(direct.size() == bb.n_items);
      CHECK(max_abs_diff(direct, via_graph[i]) < 1e-10);
    }
  }
}

TEST_CASE("forward_scores uses only the last max_len items") {
  for (Arch arch : {Arch::SASRec, Arch::Caser}) {
    num::Rng rng(6);
    const auto bb = build_backbone(arch, 25, {}, rng);
    const auto mb = apply_diet(bb, full_diet(bb));
    const Sequence nine = random_sequence(9, bb.n_items, rng);
    const Sequence last5(nine.end() - 5, nine.end());
    CHECK(forward_scores(mb, nine) == forward_scores(mb, last5));
    Sequence altered = nine;
    altered[0] = (altered[0] + 1) % 25;
    altered[3] = (altered[3] + 2) % 25;
    CHECK(forward_scores(mb, altered) == forward_scores(mb, nine));
    altered[8] = (altered[8] + 1) % 25;
    CHECK(forward_scores(mb, altered) != forward_scores(mb, nine));
  }
}

TEST_CASE("Caser with every effective weight zero scores all items identically") {
  num::Rng rng(7);
  const auto bb = build_backbone(Arch::Caser, 15, {}, rng);
  Diet zeros = full_diet(bb);
  for (auto& m : zeros.layers) std::fill(m.bits.begin(), m.bits.end(), 0);
  const auto mb = apply_diet(bb, zeros, false);
  const auto s = forward_scores(mb, Sequence{1, 4, 2});
  for (double v : s) CHECK(v == s[0]);
}

TEST_CASE("masked forward equals dense forward of pre-multiplied weights") {
  for (Arch arch : {Arch::SASRec, Arch::Caser}) {
    num::Rng rng(8);
    const auto bb = build_backbone(arch, 21, {}, rng);
    for (int trial = 0; trial < 5; ++trial) {
      const Diet diet = random_diet(bb, 0.5, rng);
      BackboneParams pre = bb;
      for (std::size_t i = 0; i < pre.layers.size(); ++i) {
        auto w = pre.layers[i].mutable_weights();
        for (std::size_t j = 0; j < w.size(); ++j) w[j] *= diet.layers[i].bits[j];
      }
      const auto masked = apply_diet(bb, diet);
      const auto dense = apply_diet(pre, full_diet(pre));
      const Sequence seq = random_sequence(1 + rng.below(7), bb.n_items, rng);
      CHECK(forward_scores(masked, seq) == forward_scores(dense, seq));
    }
  }
}

TEST_CASE("forward_scores rejects empty sequences and unknown items") {
  num::Rng rng(9);
  const auto bb = build_backbone(Arch::SASRec, 10, {}, rng);
  const auto mb = apply_diet(bb, full_diet(bb));
  CHECK_THROWS_AS(forward_scores(mb, Sequence{}), DataError);
  CHECK_THROWS_AS(forward_scores(mb, Sequence{1, 10}), DataError);
  CHECK_THROWS_AS(forward_scores(mb, Sequence{-1}), DataError);
}

TEST_CASE("checkpoint: bit-exact round trip and structured rejection") {
  num::Rng rng(10);
  for (Arch arch : {Arch::SASRec, Arch::Caser}) {
    Checkpoint ckpt;
    ckpt.backbone = build_backbone(arch, 12, {}, rng);
    ckpt.generator["g.w"] = Tensor({2, 3}, {1, 2, 3, 4, 5, -6.5});
    ckpt.score_maps["s"] = Tensor({4}, {0.1, 0.2, 0.3, 0.4});
    ckpt.config_json = R"({"mode":"diet"})";
    const auto bytes = encode_checkpoint(ckpt);
    const auto back = decode_checkpoint(bytes);
    REQUIRE(back.backbone);
    CHECK(bitwise_equal(*ckpt.backbone, *back.backbone));
    CHECK(back.generator.at("g.w").bitwise_equal(ckpt.generator.at("g.w")));
    CHECK(back.score_maps.at("s").bitwise_equal(ckpt.score_maps.at("s")));
    CHECK(back.config_json == ckpt.config_json);
    CHECK(encode_checkpoint(back) == bytes);

    auto bad = bytes;
    bad[0] = 'X';
    CHECK_THROWS_AS(decode_checkpoint(bad), DataError);
    auto cut = bytes;
    cut.resize(cut.size() / 2);
    CHECK_THROWS_AS(decode_checkpoint(cut), DataError);
  }

  // Shared-buffer backbones keep their aliasing through a round trip.
  BackboneParams shared = build_backbone(Arch::SASRec, 8, {}, rng);
  auto buffer = std::make_shared<std::vector<double>>(*shared.layers[0].storage);
  for (auto& l : shared.layers) l.storage = buffer;
  shared.shared_buffer = true;
  Checkpoint c;
  c.backbone = shared;
  const auto back = decode_checkpoint(encode_checkpoint(c));
  CHECK(bitwise_equal(shared, *back.backbone));
  CHECK(back.backbone->layers[0].storage == back.backbone->layers[11].storage);
}
