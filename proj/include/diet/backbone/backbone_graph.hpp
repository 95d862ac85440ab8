#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "diet/backbone/backbone.hpp"
#include "diet/numerics/graph.hpp"

namespace diet {

/// Graph inputs fed per batch. Sequences are left-padded to max_len:
/// `ids` and `positions` hold -1 in padded slots, `valid` holds 0 there.
inline constexpr const char* kIdsInput = "seq.ids";
inline constexpr const char* kPositionsInput = "seq.positions";
inline constexpr const char* kValidInput = "seq.valid";

struct BackboneGraph {
  num::NodeId ids = 0;
  num::NodeId positions = 0;
  num::NodeId valid = 0;
  num::NodeId item_embedding = 0;
  num::NodeId hidden = 0;  // [B, d]
};

/// Which dense tensors become trainable Param leaves; the rest are Inputs.
using DenseTrainable = std::function<bool(const std::string& name)>;

/// Creates the leaf node for every dense tensor (named by its key) and
/// returns the ids keyed by name.
std::map<std::string, num::NodeId> add_dense_leaves(num::Graph& g, const BackboneParams& bb,
                                                    const DenseTrainable& trainable);

/// Creates the sequence inputs; `hidden` is left unset.
BackboneGraph add_backbone_inputs(num::Graph& g, const std::map<std::string, num::NodeId>& dense);

/// Adds the forward pass on top of `io` and stores the result in io.hidden.
/// `weight_nodes[i]` must evaluate to layer i's effective weights as a
/// [B or 1, rows * cols] tensor.
void add_backbone_forward(num::Graph& g, const BackboneParams& bb, BackboneGraph& io,
                          const std::vector<num::NodeId>& weight_nodes, const std::map<std::string, num::NodeId>& dense);

/// Both of the above.
BackboneGraph build_backbone_graph(num::Graph& g, const BackboneParams& bb, const std::vector<num::NodeId>& weight_nodes,
                                   const std::map<std::string, num::NodeId>& dense);

struct SequenceBatch {
  num::Tensor ids;
  num::Tensor positions;
  num::Tensor valid;

  void bind(num::Bindings& b) const;
};

/// Truncates each sequence to its last max_len items and left-pads.
SequenceBatch make_sequence_batch(std::span<const Sequence> seqs, std::size_t max_len);
SequenceBatch make_sequence_batch(std::span<const std::span<const ItemId>> seqs, std::size_t max_len);

/// Binds every dense tensor of `bb` under its own name.
void bind_dense(num::Bindings& b, const BackboneParams& bb);

}  // namespace diet
