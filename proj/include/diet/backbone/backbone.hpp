#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "diet/numerics/rng.hpp"
#include "diet/numerics/tensor.hpp"
#include "diet/types.hpp"

namespace diet {

enum class Arch : std::uint8_t { SASRec = 1, Caser = 2 };

std::string_view arch_name(Arch arch);
Arch parse_arch(std::string_view name);

struct BackboneHyper {
  std::size_t d = 64;
  // SASRec
  std::size_t blocks = 2;
  std::size_t heads = 4;
  std::size_t max_len = 5;
  // Caser: horiz_filters filters for each height 1..max_horiz_height.
  std::size_t horiz_filters = 4;
  std::size_t vert_filters = 16;
  std::size_t max_horiz_height = 4;
};

enum class LayerKind : std::uint8_t { Linear = 0, ConvHorizontal = 1, ConvVertical = 2 };

/// One maskable layer, stored as a row-major rows x cols (d_out x d_in) view.
/// For convolutions a row is one filter's flattened kernel.
///
/// The storage may be shared: after dieting_bind every layer points into the
/// same W_max buffer and sees its first rows*cols entries.
struct LayerWeights {
  std::string name;
  LayerKind kind = LayerKind::Linear;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::shared_ptr<std::vector<double>> storage;

  std::size_t size() const { return rows * cols; }
  std::span<const double> weights() const { return {storage->data(), size()}; }
  std::span<double> mutable_weights() { return {storage->data(), size()}; }
};

/// Frozen network substrate. Copies are deep and keep the sharing structure:
/// a copy of a shared-buffer backbone shares one new buffer.
///
/// Layer registry order (stable, used by every wire and checkpoint format):
///   SASRec: for each block b: block{b}.attn.{q,k,v,o}, block{b}.ffn.{1,2}
///   Caser:  conv_h1 .. conv_h{H}, conv_v, fc
/// Dense (never masked) tensors live in `dense`, keyed by name.
struct BackboneParams {
  Arch arch = Arch::SASRec;
  BackboneHyper hyper;
  std::size_t n_items = 0;
  std::vector<LayerWeights> layers;
  std::map<std::string, num::Tensor> dense;
  bool shared_buffer = false;

  BackboneParams() = default;
  BackboneParams(const BackboneParams& other);
  BackboneParams& operator=(const BackboneParams& other);
  BackboneParams(BackboneParams&&) noexcept = default;
  BackboneParams& operator=(BackboneParams&&) noexcept = default;

  std::size_t maskable_count() const;
  std::size_t largest_layer() const;
  std::size_t layer_index(const std::string& name) const;
  const num::Tensor& item_embedding() const { return dense.at("item_embedding"); }
};

/// Bitwise comparison of architecture, weights and dense tensors.
bool bitwise_equal(const BackboneParams& a, const BackboneParams& b);

BackboneParams build_backbone(Arch arch, std::size_t n_items, const BackboneHyper& hyper, num::Rng& rng);

// ----------------------------------------------------------------- diets

struct LayerMask {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t keep_count = 0;
  std::vector<std::uint8_t> bits;  // 0 or 1, row-major

  std::size_t popcount() const;
};

/// Per-layer binary masks over a backbone's maskable registry.
struct Diet {
  double keep_ratio = 1.0;
  std::vector<LayerMask> layers;

  friend bool operator==(const Diet&, const Diet&) = default;
};

bool operator==(const LayerMask& a, const LayerMask& b);

/// max(1, round-half-up(keep_ratio * n)), clamped to n.
std::size_t keep_count(std::size_t n, double keep_ratio);

Diet full_diet(const BackboneParams& backbone);

/// Throws ShapeError if the diet does not match the registry; with
/// `check_keep_count`, also if a layer's popcount differs from
/// keep_count(size, keep_ratio).
void validate_diet(const BackboneParams& backbone, const Diet& diet, bool check_keep_count = true);

/// Read-only view: effective weight per layer is w ⊙ m.
class MaskedBackbone {
 public:
  MaskedBackbone(const BackboneParams& backbone, Diet diet);

  const BackboneParams& backbone() const { return *backbone_; }
  const Diet& diet() const { return diet_; }
  std::span<const double> effective(std::size_t layer) const { return effective_.at(layer); }

 private:
  const BackboneParams* backbone_;
  Diet diet_;
  std::vector<std::vector<double>> effective_;
};

MaskedBackbone apply_diet(const BackboneParams& backbone, const Diet& diet, bool validate = true);

/// The last max_len items, oldest first.
Sequence truncate_window(std::span<const ItemId> seq, std::size_t max_len);

/// Score for every item (dot product of the final hidden state with each item
/// embedding). Uses only the last max_len items of `seq`.
std::vector<double> forward_scores(const MaskedBackbone& mb, std::span<const ItemId> seq);

/// Final hidden state used for scoring.
std::vector<double> forward_hidden(const MaskedBackbone& mb, std::span<const ItemId> seq);

inline constexpr double kLayerNormEps = 1e-8;

}  // namespace diet
