#include "diet/backbone/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "diet/error.hpp"
#include "diet/numerics/init.hpp"

namespace diet {

std::string_view arch_name(Arch arch) {
  switch (arch) {
    case Arch::SASRec: return "sasrec";
    case Arch::Caser: return "caser";
  }
  return "?";
}

Arch parse_arch(std::string_view name) {
  std::string lower(name);
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
  if (lower == "sasrec") return Arch::SASRec;
  if (lower == "caser") return Arch::Caser;
  throw ConfigError("unknown architecture '" + std::string(name) + "' (expected sasrec or caser)");
}

BackboneParams::BackboneParams(const BackboneParams& other)
    : arch(other.arch), hyper(other.hyper), n_items(other.n_items), layers(other.layers), dense(other.dense),
      shared_buffer(other.shared_buffer) {
  // Deep copy, preserving which layers share storage.
  std::vector<std::pair<const std::vector<double>*, std::shared_ptr<std::vector<double>>>> remap;
  for (auto& layer : layers) {
    const auto* old = layer.storage.get();
    auto it = std::find_if(remap.begin(), remap.end(), [&](const auto& p) { return p.first == old; });
    if (it == remap.end()) {
      remap.emplace_back(old, std::make_shared<std::vector<double>>(*old));
      it = remap.end() - 1;
    }
    layer.storage = it->second;
  }
}

BackboneParams& BackboneParams::operator=(const BackboneParams& other) {
  if (this != &other) {
    BackboneParams copy(other);
    *this = std::move(copy);
  }
  return *this;
}

std::size_t BackboneParams::maskable_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.size();
  return n;
}

std::size_t BackboneParams::largest_layer() const {
  std::size_t n = 0;
  for (const auto& l : layers) n = std::max(n, l.size());
  return n;
}

std::size_t BackboneParams::layer_index(const std::string& name) const {
  for (std::size_t i = 0; i < layers.size(); ++i)
    if (layers[i].name == name) return i;
  throw ShapeError("no maskable layer named '" + name + "'");
}

bool bitwise_equal(const BackboneParams& a, const BackboneParams& b) {
  if (a.arch != b.arch || a.n_items != b.n_items || a.layers.size() != b.layers.size() ||
      a.dense.size() != b.dense.size() || a.shared_buffer != b.shared_buffer)
    return false;
  for (std::size_t i = 0; i < a.layers.size(); ++i) {
    const auto& la = a.layers[i];
    const auto& lb = b.layers[i];
    if (la.name != lb.name || la.kind != lb.kind || la.rows != lb.rows || la.cols != lb.cols) return false;
    if (std::memcmp(la.storage->data(), lb.storage->data(), la.size() * sizeof(double)) != 0) return false;
  }
  for (const auto& [name, t] : a.dense) {
    auto it = b.dense.find(name);
    if (it == b.dense.end() || !t.bitwise_equal(it->second)) return false;
  }
  return true;
}

namespace {

void add_layer(BackboneParams& bb, std::string name, LayerKind kind, std::size_t rows, std::size_t cols,
               num::Shape init_shape, num::Rng& rng) {
  num::Tensor w = num::init_xavier_normal(std::move(init_shape), rng);
  LayerWeights layer{std::move(name), kind, rows, cols, std::make_shared<std::vector<double>>(std::move(w.storage()))};
  bb.dense.emplace(layer.name + ".bias", num::Tensor({rows}, 0.0));
  bb.layers.push_back(std::move(layer));
}

void add_layer_norm(BackboneParams& bb, const std::string& name, std::size_t d) {
  bb.dense.emplace(name + ".gamma", num::Tensor({d}, 1.0));
  bb.dense.emplace(name + ".beta", num::Tensor({d}, 0.0));
}

}  // namespace

BackboneParams build_backbone(Arch arch, std::size_t n_items, const BackboneHyper& hyper, num::Rng& rng) {
  if (n_items == 0) throw ConfigError("backbone needs at least one item");
  if (hyper.d == 0 || hyper.max_len == 0) throw ConfigError("embedding size and max_len must be positive");

  BackboneParams bb;
  bb.arch = arch;
  bb.hyper = hyper;
  bb.n_items = n_items;
  const std::size_t d = hyper.d;
  const std::size_t L = hyper.max_len;

  bb.dense.emplace("item_embedding", num::init_xavier_normal({n_items, d}, rng));

  if (arch == Arch::SASRec) {
    if (hyper.heads == 0 || d % hyper.heads != 0) throw ConfigError("heads must divide the embedding size");
    if (hyper.blocks == 0) throw ConfigError("SASRec needs at least one block");
    bb.dense.emplace("position_embedding", num::init_xavier_normal({L, d}, rng));
    for (std::size_t b = 0; b < hyper.blocks; ++b) {
      const std::string p = "block" + std::to_string(b);
      for (const char* proj : {"q", "k", "v", "o"})
        add_layer(bb, p + ".attn." + proj, LayerKind::Linear, d, d, {d, d}, rng);
      add_layer(bb, p + ".ffn.1", LayerKind::Linear, d, d, {d, d}, rng);
      add_layer(bb, p + ".ffn.2", LayerKind::Linear, d, d, {d, d}, rng);
      add_layer_norm(bb, p + ".ln1", d);
      add_layer_norm(bb, p + ".ln2", d);
    }
    add_layer_norm(bb, "final_ln", d);
  } else {
    const std::size_t H = hyper.max_horiz_height;
    if (hyper.horiz_filters == 0 || hyper.vert_filters == 0 || H == 0 || H > L)
      throw ConfigError("Caser needs positive filter counts and 1 <= max_horiz_height <= max_len");
    for (std::size_t h = 1; h <= H; ++h) {
      // Kernel h x d, one input channel.
      add_layer(bb, "conv_h" + std::to_string(h), LayerKind::ConvHorizontal, hyper.horiz_filters, h * d,
                {hyper.horiz_filters, 1, h, d}, rng);
    }
    add_layer(bb, "conv_v", LayerKind::ConvVertical, hyper.vert_filters, L, {hyper.vert_filters, 1, L, 1}, rng);
    const std::size_t fc_in = hyper.vert_filters * d + hyper.horiz_filters * H;
    add_layer(bb, "fc", LayerKind::Linear, d, fc_in, {d, fc_in}, rng);
  }
  return bb;
}

// ----------------------------------------------------------------- diets

std::size_t LayerMask::popcount() const {
  std::size_t n = 0;
  for (auto b : bits) n += b != 0;
  return n;
}

bool operator==(const LayerMask& a, const LayerMask& b) {
  return a.name == b.name && a.rows == b.rows && a.cols == b.cols && a.keep_count == b.keep_count && a.bits == b.bits;
}

std::size_t keep_count(std::size_t n, double keep_ratio) {
  if (!(keep_ratio > 0.0 && keep_ratio <= 1.0)) throw ConfigError("keep_ratio must lie in (0, 1]");
  if (n == 0) throw ShapeError("keep_count of an empty layer");
  const auto k = static_cast<std::size_t>(std::floor(keep_ratio * static_cast<double>(n) + 0.5));
  return std::clamp<std::size_t>(k, 1, n);
}

Diet full_diet(const BackboneParams& backbone) {
  Diet diet;
  diet.keep_ratio = 1.0;
  for (const auto& l : backbone.layers)
    diet.layers.push_back(LayerMask{l.name, l.rows, l.cols, l.size(), std::vector<std::uint8_t>(l.size(), 1)});
  return diet;
}

void validate_diet(const BackboneParams& backbone, const Diet& diet, bool check_keep_count) {
  if (diet.layers.size() != backbone.layers.size())
    throw ShapeError("diet has " + std::to_string(diet.layers.size()) + " layers, backbone has " +
                     std::to_string(backbone.layers.size()));
  for (std::size_t i = 0; i < diet.layers.size(); ++i) {
    const auto& m = diet.layers[i];
    const auto& l = backbone.layers[i];
    if (m.name != l.name || m.rows != l.rows || m.cols != l.cols || m.bits.size() != l.size())
      throw ShapeError("diet layer " + std::to_string(i) + " ('" + m.name + "') does not match backbone layer '" +
                       l.name + "'");
    if (check_keep_count) {
      const std::size_t want = keep_count(l.size(), diet.keep_ratio);
      if (m.keep_count != want || m.popcount() != want)
        throw ShapeError("layer '" + m.name + "' keeps " + std::to_string(m.popcount()) + " weights, expected " +
                         std::to_string(want));
    }
  }
}

MaskedBackbone::MaskedBackbone(const BackboneParams& backbone, Diet diet) : backbone_(&backbone), diet_(std::move(diet)) {
  validate_diet(backbone, diet_, false);
  effective_.resize(backbone.layers.size());
  for (std::size_t i = 0; i < backbone.layers.size(); ++i) {
    const auto w = backbone.layers[i].weights();
    const auto& bits = diet_.layers[i].bits;
    auto& out = effective_[i];
    out.resize(w.size());
    for (std::size_t j = 0; j < w.size(); ++j) out[j] = bits[j] ? w[j] : 0.0;
  }
}

MaskedBackbone apply_diet(const BackboneParams& backbone, const Diet& diet, bool validate) {
  if (validate) validate_diet(backbone, diet, true);
  return MaskedBackbone(backbone, diet);
}

Sequence truncate_window(std::span<const ItemId> seq, std::size_t max_len) {
  const std::size_t start = seq.size() > max_len ? seq.size() - max_len : 0;
  return Sequence(seq.begin() + static_cast<std::ptrdiff_t>(start), seq.end());
}

}  // namespace diet
