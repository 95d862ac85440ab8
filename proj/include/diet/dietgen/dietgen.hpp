#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "diet/backbone/backbone.hpp"
#include "diet/numerics/graph.hpp"

namespace diet {

using ParamSet = std::map<std::string, num::Tensor>;

/// Cloud-side generators, one (extractor, element hypernet, row hypernet)
/// triple per maskable layer. Parameters live in `params` under
///   gen.<layer>.gru.{w_ih, w_hh, b_ih, b_hh}   GRU, gates stacked r|z|n
///   gen.<layer>.elem.{w, b}                    [d, rows*cols], [rows*cols]
///   gen.<layer>.row.{w, b}                     [d, rows], [rows]
/// The row hypernet is absent when row_correction is off.
struct GeneratorStack {
  double keep_ratio = 0.1;
  bool row_correction = true;
  std::size_t d = 0;
  std::size_t max_len = 0;
  std::vector<std::string> layers;
  std::vector<std::pair<std::size_t, std::size_t>> shapes;  // rows, cols
  ParamSet params;

  const num::Tensor& param(std::size_t layer, const std::string& what) const;
};

std::string gen_param_name(const std::string& layer, const std::string& what);

GeneratorStack build_generator_stack(const BackboneParams& bb, double keep_ratio, bool row_correction, num::Rng& rng);

/// Final hidden state of a PyTorch-convention GRU run from h = 0 over the rows
/// of `x` ([l, d]).
std::vector<double> gru_features(const num::Tensor& w_ih, const num::Tensor& w_hh, const num::Tensor& b_ih,
                                 const num::Tensor& b_hh, const num::Tensor& x);
std::vector<double> extract_features(const GeneratorStack& stack, std::size_t layer, const num::Tensor& seq_embeddings);

/// g W + b for W stored as [d, n].
std::vector<double> element_scores(const num::Tensor& w, const num::Tensor& b, std::span<const double> g);
std::vector<double> softmax(std::span<const double> logits);
std::vector<double> row_importance(const num::Tensor& w, const num::Tensor& b, std::span<const double> g);

/// S~[a, b] = S[a, b] * r[a] over a row-major rows x cols score map.
std::vector<double> correct_scores(std::span<const double> scores, std::size_t rows, std::size_t cols,
                                   std::span<const double> r);

/// Ones at the keep_count(n, keep_ratio) largest |s|; ties go to the lower
/// flat index.
std::vector<std::uint8_t> binarize_topk(std::span<const double> s, double keep_ratio);

/// Straight-through rule: the gradient on the scores is upstream ⊙ w, at kept
/// and dropped positions alike.
std::vector<double> ste_backward(std::span<const double> upstream_on_effective, std::span<const double> frozen_w);

/// Rows of the item embedding table for the last max_len items: [l, d].
num::Tensor window_embeddings(const BackboneParams& bb, std::span<const ItemId> seq);

Diet generate_diet(const GeneratorStack& stack, std::span<const ItemId> seq, const BackboneParams& bb);

/// Diet from a single global score map per layer (the mask-only ablation).
Diet diet_from_scores(const BackboneParams& bb, const std::vector<std::vector<double>>& scores, double keep_ratio);

/// Rebinds every maskable layer of `bb` to the prefix of `buffer`.
void dieting_bind(std::shared_ptr<std::vector<double>> buffer, BackboneParams& bb);

/// Copy of `bb` whose maskable layers all alias one Xavier-initialized W_max
/// shaped like the largest layer.
BackboneParams make_dieting_backbone(const BackboneParams& bb, num::Rng& rng);

// --------------------------------------------------------------- graph side

/// Custom node: row-wise top-k binarization of a [R, n] tensor, identity
/// gradient.
std::shared_ptr<const num::CustomGrad> topk_ste(double keep_ratio);

/// One fused node per layer computing topk(S~) ⊙ w from the extractor
/// features, with the same values and gradients as the primitive chain.
/// Inputs: features [B, d], elem.w [d, n], elem.b [n], w [1, n], and with
/// correction the row importance [B, rows].
std::shared_ptr<const num::FusedOp> fused_diet_head(double keep_ratio, std::size_t cols, bool row_correction);

/// Per-layer graph nodes of the generator pipeline.
struct GeneratorNodes {
  std::vector<num::NodeId> scores;     // S or S~, [B, n]; empty when fused
  std::vector<num::NodeId> masks;      // [B, n]; empty when fused
  std::vector<num::NodeId> effective;  // mask ⊙ w, [B, n]
};

/// Adds extractor, hypernets, correction and binarization for every layer.
/// `seq_emb` is [B, L, d] with zero rows at pads, `valid` is [B, L] and
/// `weights[i]` is layer i's weight as [1, n]. `fused` builds each layer's
/// head as one fused_diet_head node.
GeneratorNodes add_generator_graph(num::Graph& g, const GeneratorStack& stack, num::NodeId seq_emb, num::NodeId valid,
                                   const std::vector<num::NodeId>& weights, bool fused = false);

}  // namespace diet
