#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "diet/numerics/tensor.hpp"

namespace diet::num {

using NodeId = std::size_t;

enum class Op : std::uint8_t {
  Input,
  Param,
  MatMul,
  Add,
  Sub,
  Mul,
  Scale,
  Tanh,
  Sigmoid,
  Relu,
  Softplus,
  SoftmaxRows,
  LayerNormRows,
  Gather,
  Concat,
  Slice,
  Reshape,
  SwapLast2,
  ReduceSum,
  SumLastAxis,
  ExpandCols,
  BatchedLinear,
  CausalAttention,
  MaxOverAxis1,
  Windows,
  Custom,
  Fused,
};

std::string_view op_name(Op op);

/// A node whose backward rule is supplied by the caller instead of derived
/// from its forward function. With `backward` returning `upstream` unchanged
/// this is a straight-through estimator.
struct CustomGrad {
  std::string name;
  std::function<Tensor(const Tensor& input)> forward;
  std::function<Tensor(const Tensor& upstream, const Tensor& input, const Tensor& output)> backward;
};

/// A multi-input node with a hand-written backward rule, for hot paths where
/// a chain of primitives would materialize too many intermediates. forward
/// returns the output followed by any tensors the backward rule needs;
/// backward adds into grads[k], which is null when input k needs no gradient.
struct FusedOp {
  std::string name;
  std::function<std::vector<Tensor>(std::span<const Tensor* const> inputs)> forward;
  std::function<void(const Tensor& upstream, std::span<const Tensor* const> inputs, std::span<const Tensor> saved,
                     std::span<Tensor* const> grads)>
      backward;
};

struct Node {
  Op op = Op::Input;
  std::vector<NodeId> inputs;
  std::string name;
  double scalar = 0.0;
  std::size_t axis = 0;
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t count = 0;
  Shape shape;
  bool flag = false;
  std::shared_ptr<const CustomGrad> custom;
  std::shared_ptr<const FusedOp> fused;
};

/// Static dataflow graph. Nodes are appended in construction order, so every
/// node's inputs have smaller ids and id order is a topological order.
///
/// Broadcasting is limited to a row vector ([n] or [1,n]) as the second
/// operand of add/sub/mul against a tensor whose last axis is n.
class Graph {
 public:
  NodeId input(std::string name);
  NodeId param(std::string name);

  NodeId matmul(NodeId a, NodeId b, bool transpose_b = false);
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId scale(NodeId a, double factor);
  NodeId tanh(NodeId a);
  NodeId sigmoid(NodeId a);
  NodeId relu(NodeId a);
  NodeId softplus(NodeId a);
  NodeId softmax_rows(NodeId a);
  NodeId layer_norm_rows(NodeId a, double eps = 1e-8);
  /// Rows of `table` selected by integer-valued `ids`; id -1 yields a zero row.
  NodeId gather(NodeId table, NodeId ids);
  NodeId concat(std::vector<NodeId> parts);
  NodeId slice(NodeId a, std::size_t axis, std::size_t begin, std::size_t end);
  /// At most one extent may be 0, meaning "inferred from the element count".
  NodeId reshape(NodeId a, Shape shape);
  NodeId swap_last2(NodeId a);
  NodeId reduce_sum(NodeId a);
  NodeId sum_last_axis(NodeId a);
  /// [..., m] -> [..., m * factor], each column repeated `factor` times in place.
  NodeId expand_cols(NodeId a, std::size_t factor);
  /// x: [B, T, in] (or [B, in]); w: [B or 1, out * in] holding one row-major
  /// out x in matrix per sample. y[b, t, :] = W_b x[b, t, :].
  NodeId batched_linear(NodeId x, NodeId w, std::size_t out_features);
  /// Multi-head causal self-attention over [B, L, d] with a [B, L] key
  /// validity mask. Query rows with no valid key produce zeros.
  NodeId causal_attention(NodeId q, NodeId k, NodeId v, NodeId valid, std::size_t heads);
  NodeId max_over_axis1(NodeId a);
  /// [B, L, d] -> [B, L - h + 1, h * d] sliding windows of `height` rows.
  NodeId windows(NodeId a, std::size_t height);
  NodeId custom(NodeId a, std::shared_ptr<const CustomGrad> rule);
  NodeId fused(std::vector<NodeId> inputs, std::shared_ptr<const FusedOp> op);

  void set_output(const std::string& name, NodeId id);
  NodeId output(const std::string& name) const;
  bool has_output(const std::string& name) const;

  const Node& node(NodeId id) const { return nodes_.at(id); }
  std::size_t size() const { return nodes_.size(); }
  std::vector<NodeId> leaves(Op kind) const;

 private:
  NodeId push(Node node);
  void check_ids(std::initializer_list<NodeId> ids) const;

  std::vector<Node> nodes_;
  std::map<std::string, NodeId> outputs_;
};

/// Non-owning name -> tensor map. Bound tensors must outlive every Execution
/// created from these bindings.
class Bindings {
 public:
  Bindings& bind(const std::string& name, const Tensor& value);
  const Tensor* find(const std::string& name) const;

 private:
  std::unordered_map<std::string, const Tensor*> values_;
};

/// AllLeaves also differentiates with respect to reached Input leaves;
/// ParamsOnly skips every branch that cannot reach a Param.
enum class GradScope { AllLeaves, ParamsOnly };

class Gradients;
struct Seed;

/// Values of one forward evaluation of a graph under one binding.
class Execution {
 public:
  const Graph& graph() const { return *graph_; }
  const Tensor& value(NodeId id) const;
  const Tensor& output(const std::string& name) const { return value(graph_->output(name)); }
  bool computed(NodeId id) const { return computed_.at(id) != 0; }

 private:
  friend Execution forward_eval(const Graph&, const Bindings&, std::span<const NodeId>);
  const Graph* graph_ = nullptr;
  friend Gradients backward_pass(const Execution&, std::span<const Seed>, GradScope);
  std::vector<Tensor> values_;
  std::vector<std::vector<Tensor>> saved_;  // fused nodes only
  std::vector<const Tensor*> leaf_values_;
  std::vector<char> computed_;
};

/// Evaluates the ancestors of `outputs` (all nodes when empty). Throws
/// ShapeError on incompatible shapes or an unbound leaf, NumericError on a
/// non-finite intermediate value.
Execution forward_eval(const Graph& graph, const Bindings& bindings, std::span<const NodeId> outputs = {});

struct Seed {
  NodeId node;
  Tensor grad;
};

/// Gradients accumulated at leaves, keyed by leaf name. Every Param leaf is
/// present (zeros when unreached); Input leaves appear only when reached.
class Gradients {
 public:
  const Tensor& operator[](const std::string& leaf) const;
  bool contains(const std::string& leaf) const { return by_name_.count(leaf) != 0; }
  const std::map<std::string, Tensor>& all() const { return by_name_; }

 private:
  friend Gradients backward_pass(const Execution&, std::span<const Seed>, GradScope);
  std::map<std::string, Tensor> by_name_;
};

Gradients backward_pass(const Execution& exec, std::span<const Seed> seeds, GradScope scope = GradScope::AllLeaves);

/// Convenience: backward from a scalar node with seed 1.
Gradients backward_scalar(const Execution& exec, NodeId loss, GradScope scope = GradScope::AllLeaves);

}  // namespace diet::num
