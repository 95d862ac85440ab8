#include "diet/backbone/backbone_graph.hpp"

#include <cmath>

#include "diet/error.hpp"

namespace diet {

std::map<std::string, num::NodeId> add_dense_leaves(num::Graph& g, const BackboneParams& bb,
                                                    const DenseTrainable& trainable) {
  std::map<std::string, num::NodeId> out;
  for (const auto& [name, t] : bb.dense) out[name] = trainable && trainable(name) ? g.param(name) : g.input(name);
  return out;
}

namespace {

struct Builder {
  num::Graph& g;
  const BackboneParams& bb;
  const std::vector<num::NodeId>& w;
  const std::map<std::string, num::NodeId>& dense;

  num::NodeId D(const std::string& name) const {
    auto it = dense.find(name);
    if (it == dense.end()) throw ShapeError("backbone graph: missing dense leaf '" + name + "'");
    return it->second;
  }

  num::NodeId linear(num::NodeId x, std::size_t layer) const {
    const auto& l = bb.layers[layer];
    return g.add(g.batched_linear(x, w[layer], l.rows), D(l.name + ".bias"));
  }

  num::NodeId layer_norm(num::NodeId x, const std::string& prefix) const {
    return g.add(g.mul(g.layer_norm_rows(x, kLayerNormEps), D(prefix + ".gamma")), D(prefix + ".beta"));
  }

  num::NodeId sasrec(const BackboneGraph& io) const {
    const auto& hp = bb.hyper;
    const double emb_scale = std::sqrt(static_cast<double>(hp.d));
    num::NodeId x = g.add(g.scale(g.gather(io.item_embedding, io.ids), emb_scale),
                          g.gather(D("position_embedding"), io.positions));
    for (std::size_t b = 0; b < hp.blocks; ++b) {
      const std::string p = "block" + std::to_string(b);
      const std::size_t base = b * 6;
      const num::NodeId a = layer_norm(x, p + ".ln1");
      const num::NodeId attn =
          g.causal_attention(linear(a, base + 0), linear(a, base + 1), linear(a, base + 2), io.valid, hp.heads);
      x = g.add(x, linear(attn, base + 3));
      const num::NodeId f = layer_norm(x, p + ".ln2");
      x = g.add(x, linear(g.relu(linear(f, base + 4)), base + 5));
    }
    const num::NodeId last = g.reshape(g.slice(x, 1, hp.max_len - 1, hp.max_len), {0, hp.d});
    return layer_norm(last, "final_ln");
  }

  num::NodeId caser(const BackboneGraph& io) const {
    const auto& hp = bb.hyper;
    const std::size_t H = hp.max_horiz_height;
    const num::NodeId img = g.gather(io.item_embedding, io.ids);  // [B, L, d], zero rows for pads

    // Vertical filters act along the sequence axis of each embedding column.
    const std::size_t iv = bb.layer_index("conv_v");
    num::NodeId vert = g.batched_linear(g.swap_last2(img), w[iv], hp.vert_filters);  // [B, d, F]
    vert = g.add(vert, D("conv_v.bias"));
    std::vector<num::NodeId> parts{g.reshape(g.swap_last2(vert), {0, hp.vert_filters * hp.d})};

    for (std::size_t h = 1; h <= H; ++h) {
      const num::NodeId conv = g.tanh(linear(g.windows(img, h), h - 1));  // [B, L-h+1, F]
      parts.push_back(g.max_over_axis1(conv));
    }
    return g.tanh(linear(g.concat(std::move(parts)), bb.layer_index("fc")));
  }
};

}  // namespace

BackboneGraph add_backbone_inputs(num::Graph& g, const std::map<std::string, num::NodeId>& dense) {
  BackboneGraph io;
  io.ids = g.input(kIdsInput);
  io.positions = g.input(kPositionsInput);
  io.valid = g.input(kValidInput);
  auto it = dense.find("item_embedding");
  if (it == dense.end()) throw ShapeError("backbone graph: missing dense leaf 'item_embedding'");
  io.item_embedding = it->second;
  return io;
}

void add_backbone_forward(num::Graph& g, const BackboneParams& bb, BackboneGraph& io,
                          const std::vector<num::NodeId>& weight_nodes, const std::map<std::string, num::NodeId>& dense) {
  if (weight_nodes.size() != bb.layers.size())
    throw ShapeError("backbone graph: expected " + std::to_string(bb.layers.size()) + " weight nodes");
  Builder builder{g, bb, weight_nodes, dense};
  io.hidden = bb.arch == Arch::SASRec ? builder.sasrec(io) : builder.caser(io);
}

BackboneGraph build_backbone_graph(num::Graph& g, const BackboneParams& bb, const std::vector<num::NodeId>& weight_nodes,
                                   const std::map<std::string, num::NodeId>& dense) {
  BackboneGraph io = add_backbone_inputs(g, dense);
  add_backbone_forward(g, bb, io, weight_nodes, dense);
  return io;
}

void SequenceBatch::bind(num::Bindings& b) const {
  b.bind(kIdsInput, ids).bind(kPositionsInput, positions).bind(kValidInput, valid);
}

SequenceBatch make_sequence_batch(std::span<const std::span<const ItemId>> seqs, std::size_t max_len) {
  if (seqs.empty()) throw ShapeError("empty sequence batch");
  const std::size_t B = seqs.size();
  SequenceBatch out{num::Tensor({B, max_len}, -1.0), num::Tensor({B, max_len}, -1.0), num::Tensor({B, max_len}, 0.0)};
  for (std::size_t b = 0; b < B; ++b) {
    const auto seq = seqs[b];
    if (seq.empty()) throw DataError("empty sequence in batch");
    const std::size_t n = std::min(seq.size(), max_len);
    const std::size_t first = max_len - n;
    for (std::size_t t = 0; t < n; ++t) {
      const std::size_t slot = first + t;
      out.ids[b * max_len + slot] = static_cast<double>(seq[seq.size() - n + t]);
      out.positions[b * max_len + slot] = static_cast<double>(slot);
      out.valid[b * max_len + slot] = 1.0;
    }
  }
  return out;
}

SequenceBatch make_sequence_batch(std::span<const Sequence> seqs, std::size_t max_len) {
  std::vector<std::span<const ItemId>> views(seqs.begin(), seqs.end());
  return make_sequence_batch(std::span<const std::span<const ItemId>>(views), max_len);
}

void bind_dense(num::Bindings& b, const BackboneParams& bb) {
  for (const auto& [name, t] : bb.dense) b.bind(name, t);
}

}  // namespace diet
