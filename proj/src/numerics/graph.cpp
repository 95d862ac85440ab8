#include "diet/numerics/graph.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>

#include "diet/error.hpp"

namespace diet::num {

namespace {

using MatrixRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatrixRM>;
using ConstMapRM = Eigen::Map<const MatrixRM>;

ConstMapRM cmap(const double* p, std::size_t r, std::size_t c) {
  return ConstMapRM(p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
MapRM map(double* p, std::size_t r, std::size_t c) {
  return MapRM(p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

std::size_t cols_of(const Tensor& t) { return t.shape().back(); }
std::size_t rows_of(const Tensor& t) { return t.size() / t.shape().back(); }

[[noreturn]] void shape_fail(NodeId id, Op op, const std::string& what) {
  throw ShapeError("node " + std::to_string(id) + " (" + std::string(op_name(op)) + "): " + what);
}

bool is_row_broadcast(const Tensor& a, const Tensor& b) {
  return a.shape() != b.shape() && b.size() == cols_of(a) &&
         (b.rank() == 1 || (b.rank() == 2 && b.dim(0) == 1));
}

void check_binary(NodeId id, Op op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape() && !is_row_broadcast(a, b)) {
    shape_fail(id, op, "incompatible operands " + shape_string(a.shape()) + " and " + shape_string(b.shape()));
  }
}

double sigmoid_of(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus_of(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

long checked_id(double raw, std::size_t table_rows, NodeId id) {
  const double rounded = std::nearbyint(raw);
  if (rounded != raw || rounded < -1.0 || rounded >= static_cast<double>(table_rows)) {
    shape_fail(id, Op::Gather, "invalid row id " + std::to_string(raw));
  }
  return static_cast<long>(rounded);
}

// Middle-axis view used by Slice: [outer, axis_len, inner].
struct AxisView {
  std::size_t outer = 1;
  std::size_t len = 1;
  std::size_t inner = 1;
};

AxisView axis_view(const Shape& s, std::size_t axis) {
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= s[i];
  v.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) v.inner *= s[i];
  return v;
}

// Attention probabilities for one (batch, head): p[i*L + j].
void attention_probs(const double* q, const double* k, const double* valid, std::size_t L, std::size_t d,
                     std::size_t head_off, std::size_t dh, std::vector<double>& p) {
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  p.assign(L * L, 0.0);
  for (std::size_t i = 0; i < L; ++i) {
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j <= i; ++j) {
      if (valid[j] == 0.0) continue;
      double s = 0.0;
      for (std::size_t c = 0; c < dh; ++c) s += q[i * d + head_off + c] * k[j * d + head_off + c];
      s *= inv;
      p[i * L + j] = s;
      best = std::max(best, s);
    }
    if (best == -std::numeric_limits<double>::infinity()) continue;
    double total = 0.0;
    for (std::size_t j = 0; j <= i; ++j) {
      if (valid[j] == 0.0) continue;
      p[i * L + j] = std::exp(p[i * L + j] - best);
      total += p[i * L + j];
    }
    for (std::size_t j = 0; j <= i; ++j) p[i * L + j] = valid[j] == 0.0 ? 0.0 : p[i * L + j] / total;
  }
}

}  // namespace

std::string_view op_name(Op op) {
  switch (op) {
    case Op::Input: return "input";
    case Op::Param: return "param";
    case Op::MatMul: return "matmul";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Scale: return "scale";
    case Op::Tanh: return "tanh";
    case Op::Sigmoid: return "sigmoid";
    case Op::Relu: return "relu";
    case Op::Softplus: return "softplus";
    case Op::SoftmaxRows: return "softmax-rows";
    case Op::LayerNormRows: return "layer-norm-rows";
    case Op::Gather: return "embedding-gather";
    case Op::Concat: return "concat";
    case Op::Slice: return "slice";
    case Op::Reshape: return "reshape";
    case Op::SwapLast2: return "swap-last2";
    case Op::ReduceSum: return "reduce-sum";
    case Op::SumLastAxis: return "sum-last-axis";
    case Op::ExpandCols: return "expand-cols";
    case Op::BatchedLinear: return "batched-linear";
    case Op::CausalAttention: return "causal-attention";
    case Op::MaxOverAxis1: return "max-over-axis1";
    case Op::Windows: return "windows";
    case Op::Custom: return "custom-grad";
    case Op::Fused: return "fused";
  }
  return "?";
}

// ---------------------------------------------------------------- Graph

NodeId Graph::push(Node node) {
  nodes_.push_back(std::move(node));
  return nodes_.size() - 1;
}

void Graph::check_ids(std::initializer_list<NodeId> ids) const {
  for (NodeId id : ids) {
    if (id >= nodes_.size()) throw std::out_of_range("graph: unknown node id " + std::to_string(id));
  }
}

NodeId Graph::input(std::string name) { return push({.op = Op::Input, .name = std::move(name)}); }
NodeId Graph::param(std::string name) { return push({.op = Op::Param, .name = std::move(name)}); }

NodeId Graph::matmul(NodeId a, NodeId b, bool transpose_b) {
  check_ids({a, b});
  return push({.op = Op::MatMul, .inputs = {a, b}, .flag = transpose_b});
}

#define DIET_UNARY(fn, kind)            \
  NodeId Graph::fn(NodeId a) {          \
    check_ids({a});                     \
    return push({.op = kind, .inputs = {a}}); \
  }
DIET_UNARY(tanh, Op::Tanh)
DIET_UNARY(sigmoid, Op::Sigmoid)
DIET_UNARY(relu, Op::Relu)
DIET_UNARY(softplus, Op::Softplus)
DIET_UNARY(softmax_rows, Op::SoftmaxRows)
DIET_UNARY(swap_last2, Op::SwapLast2)
DIET_UNARY(reduce_sum, Op::ReduceSum)
DIET_UNARY(sum_last_axis, Op::SumLastAxis)
DIET_UNARY(max_over_axis1, Op::MaxOverAxis1)
#undef DIET_UNARY

NodeId Graph::add(NodeId a, NodeId b) {
  check_ids({a, b});
  return push({.op = Op::Add, .inputs = {a, b}});
}
NodeId Graph::sub(NodeId a, NodeId b) {
  check_ids({a, b});
  return push({.op = Op::Sub, .inputs = {a, b}});
}
NodeId Graph::mul(NodeId a, NodeId b) {
  check_ids({a, b});
  return push({.op = Op::Mul, .inputs = {a, b}});
}
NodeId Graph::scale(NodeId a, double factor) {
  check_ids({a});
  return push({.op = Op::Scale, .inputs = {a}, .scalar = factor});
}
NodeId Graph::layer_norm_rows(NodeId a, double eps) {
  check_ids({a});
  return push({.op = Op::LayerNormRows, .inputs = {a}, .scalar = eps});
}
NodeId Graph::gather(NodeId table, NodeId ids) {
  check_ids({table, ids});
  return push({.op = Op::Gather, .inputs = {table, ids}});
}
NodeId Graph::concat(std::vector<NodeId> parts) {
  if (parts.empty()) throw std::invalid_argument("graph: concat needs at least one part");
  for (NodeId id : parts) check_ids({id});
  return push({.op = Op::Concat, .inputs = std::move(parts)});
}
NodeId Graph::slice(NodeId a, std::size_t axis, std::size_t begin, std::size_t end) {
  check_ids({a});
  if (end <= begin) throw std::invalid_argument("graph: empty slice");
  return push({.op = Op::Slice, .inputs = {a}, .axis = axis, .begin = begin, .end = end});
}
NodeId Graph::reshape(NodeId a, Shape shape) {
  check_ids({a});
  if (std::count(shape.begin(), shape.end(), 0u) > 1) throw std::invalid_argument("graph: reshape infers at most one axis");
  return push({.op = Op::Reshape, .inputs = {a}, .shape = std::move(shape)});
}
NodeId Graph::expand_cols(NodeId a, std::size_t factor) {
  check_ids({a});
  if (factor == 0) throw std::invalid_argument("graph: expand factor must be positive");
  return push({.op = Op::ExpandCols, .inputs = {a}, .count = factor});
}
NodeId Graph::batched_linear(NodeId x, NodeId w, std::size_t out_features) {
  check_ids({x, w});
  if (out_features == 0) throw std::invalid_argument("graph: out_features must be positive");
  return push({.op = Op::BatchedLinear, .inputs = {x, w}, .count = out_features});
}
NodeId Graph::causal_attention(NodeId q, NodeId k, NodeId v, NodeId valid, std::size_t heads) {
  check_ids({q, k, v, valid});
  if (heads == 0) throw std::invalid_argument("graph: heads must be positive");
  return push({.op = Op::CausalAttention, .inputs = {q, k, v, valid}, .count = heads});
}
NodeId Graph::windows(NodeId a, std::size_t height) {
  check_ids({a});
  if (height == 0) throw std::invalid_argument("graph: window height must be positive");
  return push({.op = Op::Windows, .inputs = {a}, .count = height});
}
NodeId Graph::fused(std::vector<NodeId> inputs, std::shared_ptr<const FusedOp> op) {
  for (NodeId id : inputs) check_ids({id});
  if (!op || !op->forward || !op->backward) throw std::invalid_argument("graph: incomplete fused op");
  return push({.op = Op::Fused, .inputs = std::move(inputs), .fused = std::move(op)});
}

NodeId Graph::custom(NodeId a, std::shared_ptr<const CustomGrad> rule) {
  check_ids({a});
  if (!rule || !rule->forward || !rule->backward) throw std::invalid_argument("graph: incomplete custom-grad rule");
  return push({.op = Op::Custom, .inputs = {a}, .custom = std::move(rule)});
}

void Graph::set_output(const std::string& name, NodeId id) {
  check_ids({id});
  outputs_[name] = id;
}

NodeId Graph::output(const std::string& name) const {
  auto it = outputs_.find(name);
  if (it == outputs_.end()) throw std::out_of_range("graph: no output named '" + name + "'");
  return it->second;
}

bool Graph::has_output(const std::string& name) const { return outputs_.count(name) != 0; }

std::vector<NodeId> Graph::leaves(Op kind) const {
  std::vector<NodeId> ids;
  for (NodeId i = 0; i < nodes_.size(); ++i) {
    if (nodes_[i].op == kind) ids.push_back(i);
  }
  return ids;
}

// ---------------------------------------------------------------- Bindings

Bindings& Bindings::bind(const std::string& name, const Tensor& value) {
  values_[name] = &value;
  return *this;
}

const Tensor* Bindings::find(const std::string& name) const {
  auto it = values_.find(name);
  return it == values_.end() ? nullptr : it->second;
}

const Tensor& Execution::value(NodeId id) const {
  if (!computed(id)) throw std::logic_error("execution: node " + std::to_string(id) + " was not evaluated");
  return leaf_values_[id] ? *leaf_values_[id] : values_[id];
}

// ---------------------------------------------------------------- forward

namespace {

Tensor eval_node(NodeId id, const Node& n, const std::vector<const Tensor*>& in) {
  auto A = [&]() -> const Tensor& { return *in[0]; };
  auto B = [&]() -> const Tensor& { return *in[1]; };

  switch (n.op) {
    case Op::Input:
    case Op::Param:
    case Op::Fused:  // evaluated by forward_eval itself
      break;

    case Op::MatMul: {
      const Tensor& a = A();
      const Tensor& b = B();
      if (a.rank() != 2 || b.rank() != 2) shape_fail(id, n.op, "operands must be 2-D");
      const std::size_t m = a.dim(0), k = a.dim(1);
      const std::size_t bk = n.flag ? b.dim(1) : b.dim(0);
      const std::size_t cols = n.flag ? b.dim(0) : b.dim(1);
      if (bk != k) shape_fail(id, n.op, shape_string(a.shape()) + " x " + shape_string(b.shape()));
      Tensor out({m, cols});
      auto am = cmap(a.data().data(), m, k);
      if (n.flag) {
        map(out.data().data(), m, cols).noalias() = am * cmap(b.data().data(), cols, k).transpose();
      } else {
        map(out.data().data(), m, cols).noalias() = am * cmap(b.data().data(), k, cols);
      }
      return out;
    }

    case Op::Add:
    case Op::Sub:
    case Op::Mul: {
      const Tensor& a = A();
      const Tensor& b = B();
      check_binary(id, n.op, a, b);
      Tensor out(a.shape());
      const std::size_t c = a.shape() != b.shape() ? b.size() : a.size();
      const double* pa = a.data().data();
      const double* pb = b.data().data();
      double* po = out.data().data();
      for (std::size_t r = 0; r < a.size(); r += c) {
        if (n.op == Op::Add) {
          for (std::size_t j = 0; j < c; ++j) po[r + j] = pa[r + j] + pb[j];
        } else if (n.op == Op::Sub) {
          for (std::size_t j = 0; j < c; ++j) po[r + j] = pa[r + j] - pb[j];
        } else {
          for (std::size_t j = 0; j < c; ++j) po[r + j] = pa[r + j] * pb[j];
        }
      }
      return out;
    }

    case Op::Scale: {
      Tensor out(A().shape());
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = n.scalar * A()[i];
      return out;
    }

    case Op::Tanh:
    case Op::Sigmoid:
    case Op::Relu:
    case Op::Softplus: {
      Tensor out(A().shape());
      for (std::size_t i = 0; i < out.size(); ++i) {
        const double x = A()[i];
        switch (n.op) {
          case Op::Tanh: out[i] = std::tanh(x); break;
          case Op::Sigmoid: out[i] = sigmoid_of(x); break;
          case Op::Relu: out[i] = x > 0.0 ? x : 0.0; break;
          default: out[i] = softplus_of(x); break;
        }
      }
      return out;
    }

    case Op::SoftmaxRows: {
      const Tensor& a = A();
      Tensor out(a.shape());
      const std::size_t r = rows_of(a), c = cols_of(a);
      for (std::size_t i = 0; i < r; ++i) {
        const double* x = a.data().data() + i * c;
        double* y = out.data().data() + i * c;
        const double best = *std::max_element(x, x + c);
        double total = 0.0;
        for (std::size_t j = 0; j < c; ++j) total += (y[j] = std::exp(x[j] - best));
        for (std::size_t j = 0; j < c; ++j) y[j] /= total;
      }
      return out;
    }

    case Op::LayerNormRows: {
      const Tensor& a = A();
      Tensor out(a.shape());
      const std::size_t r = rows_of(a), c = cols_of(a);
      for (std::size_t i = 0; i < r; ++i) {
        const double* x = a.data().data() + i * c;
        double mean = 0.0;
        for (std::size_t j = 0; j < c; ++j) mean += x[j];
        mean /= static_cast<double>(c);
        double var = 0.0;
        for (std::size_t j = 0; j < c; ++j) var += (x[j] - mean) * (x[j] - mean);
        var /= static_cast<double>(c);
        const double inv = 1.0 / std::sqrt(var + n.scalar);
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = (x[j] - mean) * inv;
      }
      return out;
    }

    case Op::Gather: {
      const Tensor& table = A();
      const Tensor& ids = B();
      if (table.rank() != 2) shape_fail(id, n.op, "table must be 2-D");
      const std::size_t d = table.dim(1);
      Shape shape = ids.shape();
      shape.push_back(d);
      Tensor out(shape);
      for (std::size_t i = 0; i < ids.size(); ++i) {
        const long row = checked_id(ids[i], table.dim(0), id);
        if (row < 0) continue;
        std::copy_n(table.data().data() + static_cast<std::size_t>(row) * d, d, out.data().data() + i * d);
      }
      return out;
    }

    case Op::Concat: {
      const std::size_t r = rows_of(*in[0]);
      std::size_t total = 0;
      for (const Tensor* t : in) {
        if (rows_of(*t) != r || t->rank() != in[0]->rank()) shape_fail(id, n.op, "parts disagree on leading axes");
        total += cols_of(*t);
      }
      Shape shape = in[0]->shape();
      shape.back() = total;
      Tensor out(shape);
      std::size_t off = 0;
      for (const Tensor* t : in) {
        const std::size_t c = cols_of(*t);
        for (std::size_t i = 0; i < r; ++i) {
          std::copy_n(t->data().data() + i * c, c, out.data().data() + i * total + off);
        }
        off += c;
      }
      return out;
    }

    case Op::Slice: {
      const Tensor& a = A();
      if (n.axis >= a.rank() || n.end > a.dim(n.axis)) shape_fail(id, n.op, "slice out of range for " + shape_string(a.shape()));
      const AxisView v = axis_view(a.shape(), n.axis);
      Shape shape = a.shape();
      shape[n.axis] = n.end - n.begin;
      Tensor out(shape);
      const std::size_t len = n.end - n.begin;
      for (std::size_t o = 0; o < v.outer; ++o) {
        std::copy_n(a.data().data() + (o * v.len + n.begin) * v.inner, len * v.inner,
                    out.data().data() + o * len * v.inner);
      }
      return out;
    }

    case Op::Reshape: {
      Shape shape = n.shape;
      std::size_t known = 1;
      for (std::size_t e : shape) known *= (e == 0 ? 1 : e);
      for (std::size_t& e : shape) {
        if (e == 0) {
          if (known == 0 || A().size() % known != 0) shape_fail(id, n.op, "cannot infer axis");
          e = A().size() / known;
        }
      }
      if (shape_size(shape) != A().size()) {
        shape_fail(id, n.op, "cannot reshape " + shape_string(A().shape()) + " to " + shape_string(shape));
      }
      return A().reshaped(shape);
    }

    case Op::SwapLast2: {
      const Tensor& a = A();
      if (a.rank() < 2) shape_fail(id, n.op, "needs rank >= 2");
      const std::size_t m = a.dim(a.rank() - 2), c = a.dim(a.rank() - 1);
      const std::size_t batch = a.size() / (m * c);
      Shape shape = a.shape();
      std::swap(shape[shape.size() - 2], shape[shape.size() - 1]);
      Tensor out(shape);
      for (std::size_t b = 0; b < batch; ++b) {
        map(out.data().data() + b * m * c, c, m) = cmap(a.data().data() + b * m * c, m, c).transpose();
      }
      return out;
    }

    case Op::ReduceSum: {
      double total = 0.0;
      for (double v : A().data()) total += v;
      return Tensor({1}, {total});
    }

    case Op::SumLastAxis: {
      const Tensor& a = A();
      Shape shape = a.shape();
      shape.back() = 1;
      Tensor out(shape);
      const std::size_t c = cols_of(a);
      for (std::size_t i = 0; i < out.size(); ++i) {
        double total = 0.0;
        for (std::size_t j = 0; j < c; ++j) total += a[i * c + j];
        out[i] = total;
      }
      return out;
    }

    case Op::ExpandCols: {
      const Tensor& a = A();
      Shape shape = a.shape();
      shape.back() *= n.count;
      Tensor out(shape);
      for (std::size_t i = 0; i < a.size(); ++i) std::fill_n(out.data().data() + i * n.count, n.count, a[i]);
      return out;
    }

    case Op::BatchedLinear: {
      const Tensor& x = A();
      const Tensor& w = B();
      if (x.rank() < 2 || w.rank() != 2) shape_fail(id, n.op, "x must be [B,...,in], w must be 2-D");
      const std::size_t batch = x.dim(0), in_f = cols_of(x), out_f = n.count;
      const std::size_t steps = x.size() / (batch * in_f);
      if (w.dim(1) != out_f * in_f || (w.dim(0) != 1 && w.dim(0) != batch)) {
        shape_fail(id, n.op, "weight " + shape_string(w.shape()) + " incompatible with x " + shape_string(x.shape()));
      }
      Shape shape = x.shape();
      shape.back() = out_f;
      Tensor out(shape);
      if (w.dim(0) == 1) {
        map(out.data().data(), batch * steps, out_f).noalias() =
            cmap(x.data().data(), batch * steps, in_f) * cmap(w.data().data(), out_f, in_f).transpose();
      } else {
        for (std::size_t b = 0; b < batch; ++b) {
          map(out.data().data() + b * steps * out_f, steps, out_f).noalias() =
              cmap(x.data().data() + b * steps * in_f, steps, in_f) *
              cmap(w.data().data() + b * out_f * in_f, out_f, in_f).transpose();
        }
      }
      return out;
    }

    case Op::CausalAttention: {
      const Tensor& q = *in[0];
      const Tensor& k = *in[1];
      const Tensor& v = *in[2];
      const Tensor& valid = *in[3];
      if (q.rank() != 3 || q.shape() != k.shape() || q.shape() != v.shape()) shape_fail(id, n.op, "q, k, v must share [B,L,d]");
      const std::size_t batch = q.dim(0), L = q.dim(1), d = q.dim(2);
      if (valid.size() != batch * L) shape_fail(id, n.op, "valid mask must be [B,L]");
      if (d % n.count != 0) shape_fail(id, n.op, "heads must divide d");
      const std::size_t dh = d / n.count;
      Tensor out(q.shape());
      std::vector<double> p;
      for (std::size_t b = 0; b < batch; ++b) {
        const std::size_t base = b * L * d;
        for (std::size_t h = 0; h < n.count; ++h) {
          attention_probs(q.data().data() + base, k.data().data() + base, valid.data().data() + b * L, L, d, h * dh, dh, p);
          for (std::size_t i = 0; i < L; ++i) {
            for (std::size_t j = 0; j <= i; ++j) {
              const double pij = p[i * L + j];
              if (pij == 0.0) continue;
              for (std::size_t c = 0; c < dh; ++c) out[base + i * d + h * dh + c] += pij * v[base + j * d + h * dh + c];
            }
          }
        }
      }
      return out;
    }

    case Op::MaxOverAxis1: {
      const Tensor& a = A();
      if (a.rank() != 3) shape_fail(id, n.op, "needs [B,T,C]");
      const std::size_t batch = a.dim(0), T = a.dim(1), C = a.dim(2);
      Tensor out({batch, C});
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t c = 0; c < C; ++c) {
          double best = a[b * T * C + c];
          for (std::size_t t = 1; t < T; ++t) best = std::max(best, a[(b * T + t) * C + c]);
          out[b * C + c] = best;
        }
      }
      return out;
    }

    case Op::Windows: {
      const Tensor& a = A();
      if (a.rank() != 3) shape_fail(id, n.op, "needs [B,L,d]");
      const std::size_t batch = a.dim(0), L = a.dim(1), d = a.dim(2), h = n.count;
      if (h > L) shape_fail(id, n.op, "window taller than sequence");
      const std::size_t T = L - h + 1;
      Tensor out({batch, T, h * d});
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t t = 0; t < T; ++t) {
          std::copy_n(a.data().data() + (b * L + t) * d, h * d, out.data().data() + (b * T + t) * h * d);
        }
      }
      return out;
    }

    case Op::Custom: {
      Tensor out = n.custom->forward(A());
      if (out.shape() != A().shape()) shape_fail(id, n.op, "custom rule '" + n.custom->name + "' must preserve shape");
      return out;
    }
  }
  shape_fail(id, n.op, "unhandled op");
}

}  // namespace

Execution forward_eval(const Graph& graph, const Bindings& bindings, std::span<const NodeId> outputs) {
  const std::size_t count = graph.size();
  std::vector<char> needed(count, outputs.empty() ? 1 : 0);
  for (NodeId id : outputs) {
    if (id >= count) throw std::out_of_range("forward_eval: unknown output node");
    needed[id] = 1;
  }
  if (!outputs.empty()) {
    for (NodeId i = count; i-- > 0;) {
      if (!needed[i]) continue;
      for (NodeId j : graph.node(i).inputs) needed[j] = 1;
    }
  }

  Execution exec;
  exec.graph_ = &graph;
  exec.values_.resize(count);
  exec.leaf_values_.assign(count, nullptr);
  exec.computed_.assign(count, 0);

  std::vector<const Tensor*> in;
  for (NodeId i = 0; i < count; ++i) {
    if (!needed[i]) continue;
    const Node& n = graph.node(i);
    if (n.op == Op::Input || n.op == Op::Param) {
      const Tensor* bound = bindings.find(n.name);
      if (!bound) throw ShapeError("forward_eval: unbound leaf '" + n.name + "'");
      if (!bound->all_finite()) throw NumericError("forward_eval: non-finite value bound to '" + n.name + "'");
      exec.leaf_values_[i] = bound;
    } else {
      in.clear();
      for (NodeId j : n.inputs) in.push_back(&exec.value(j));
      if (n.op == Op::Fused) {
        auto results = n.fused->forward(in);
        if (results.empty()) shape_fail(i, n.op, "fused op '" + n.fused->name + "' returned nothing");
        exec.values_[i] = std::move(results.front());
        results.erase(results.begin());
        if (exec.saved_.size() < count) exec.saved_.resize(count);
        exec.saved_[i] = std::move(results);
      } else {
        exec.values_[i] = eval_node(i, n, in);
      }
      if (!exec.values_[i].all_finite()) {
        throw NumericError("forward_eval: non-finite output at node " + std::to_string(i) + " (" +
                           std::string(op_name(n.op)) + ")");
      }
    }
    exec.computed_[i] = 1;
  }
  return exec;
}

// ---------------------------------------------------------------- backward

namespace {

class GradBuffers {
 public:
  GradBuffers(const Execution& exec) : exec_(exec), grads_(exec.graph().size()) {}

  Tensor& at(NodeId id) {
    if (grads_[id].empty()) grads_[id] = Tensor(exec_.value(id).shape());
    return grads_[id];
  }
  bool has(NodeId id) const { return !grads_[id].empty(); }
  Tensor take(NodeId id) { return std::move(grads_[id]); }

 private:
  const Execution& exec_;
  std::vector<Tensor> grads_;
};

void accumulate_broadcast(Tensor& target, const Tensor& contribution, bool broadcast) {
  const std::size_t c = broadcast ? target.size() : contribution.size();
  for (std::size_t r = 0; r < contribution.size(); r += c)
    for (std::size_t j = 0; j < c; ++j) target[j] += contribution[r + j];
}

void backprop_node(NodeId id, const Node& n, const Execution& exec, const Tensor& g, GradBuffers& grads,
                   const std::vector<char>& requires_grad) {
  auto val = [&](std::size_t k) -> const Tensor& { return exec.value(n.inputs[k]); };
  auto want = [&](std::size_t k) { return requires_grad[n.inputs[k]] != 0; };
  auto acc = [&](std::size_t k) -> Tensor& { return grads.at(n.inputs[k]); };
  const Tensor& y = exec.value(id);

  switch (n.op) {
    case Op::Input:
    case Op::Param:
    case Op::Fused:  // handled by backward_pass itself
      return;

    case Op::MatMul: {
      const Tensor& a = val(0);
      const Tensor& b = val(1);
      const std::size_t m = a.dim(0), k = a.dim(1), c = y.dim(1);
      auto gm = cmap(g.data().data(), m, c);
      auto am = cmap(a.data().data(), m, k);
      if (n.flag) {
        auto bm = cmap(b.data().data(), c, k);
        if (want(0)) map(acc(0).data().data(), m, k).noalias() += gm * bm;
        if (want(1)) map(acc(1).data().data(), c, k).noalias() += gm.transpose() * am;
      } else {
        auto bm = cmap(b.data().data(), k, c);
        if (want(0)) map(acc(0).data().data(), m, k).noalias() += gm * bm.transpose();
        if (want(1)) map(acc(1).data().data(), k, c).noalias() += am.transpose() * gm;
      }
      return;
    }

    case Op::Add:
    case Op::Sub: {
      if (want(0)) accumulate_broadcast(acc(0), g, false);
      if (want(1)) {
        Tensor& gb = acc(1);
        const double sign = n.op == Op::Add ? 1.0 : -1.0;
        const std::size_t c = gb.size();
        for (std::size_t r = 0; r < g.size(); r += c)
          for (std::size_t j = 0; j < c; ++j) gb[j] += sign * g[r + j];
      }
      return;
    }

    case Op::Mul: {
      const Tensor& a = val(0);
      const Tensor& b = val(1);
      const std::size_t c = b.size();
      if (want(0)) {
        double* ga = acc(0).data().data();
        for (std::size_t r = 0; r < g.size(); r += c)
          for (std::size_t j = 0; j < c; ++j) ga[r + j] += g[r + j] * b[j];
      }
      if (want(1)) {
        double* gb = acc(1).data().data();
        for (std::size_t r = 0; r < g.size(); r += c)
          for (std::size_t j = 0; j < c; ++j) gb[j] += g[r + j] * a[r + j];
      }
      return;
    }

    case Op::Scale: {
      Tensor& ga = acc(0);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += n.scalar * g[i];
      return;
    }

    case Op::Tanh: {
      Tensor& ga = acc(0);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (1.0 - y[i] * y[i]);
      return;
    }
    case Op::Sigmoid: {
      Tensor& ga = acc(0);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
      return;
    }
    case Op::Relu: {
      const Tensor& a = val(0);
      Tensor& ga = acc(0);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += a[i] > 0.0 ? g[i] : 0.0;
      return;
    }
    case Op::Softplus: {
      const Tensor& a = val(0);
      Tensor& ga = acc(0);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * sigmoid_of(a[i]);
      return;
    }

    case Op::SoftmaxRows: {
      Tensor& ga = acc(0);
      const std::size_t r = rows_of(y), c = cols_of(y);
      for (std::size_t i = 0; i < r; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * y[i * c + j];
        for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += y[i * c + j] * (g[i * c + j] - dot);
      }
      return;
    }

    case Op::LayerNormRows: {
      const Tensor& a = val(0);
      Tensor& ga = acc(0);
      const std::size_t r = rows_of(y), c = cols_of(y);
      const double cn = static_cast<double>(c);
      for (std::size_t i = 0; i < r; ++i) {
        double mean = 0.0;
        for (std::size_t j = 0; j < c; ++j) mean += a[i * c + j];
        mean /= cn;
        double var = 0.0;
        for (std::size_t j = 0; j < c; ++j) var += (a[i * c + j] - mean) * (a[i * c + j] - mean);
        var /= cn;
        const double inv = 1.0 / std::sqrt(var + n.scalar);
        double g_mean = 0.0, gy_mean = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
          g_mean += g[i * c + j];
          gy_mean += g[i * c + j] * y[i * c + j];
        }
        g_mean /= cn;
        gy_mean /= cn;
        for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += inv * (g[i * c + j] - g_mean - y[i * c + j] * gy_mean);
      }
      return;
    }

    case Op::Gather: {
      const Tensor& table = val(0);
      const Tensor& ids = val(1);
      const std::size_t d = table.dim(1);
      Tensor& gt = acc(0);
      for (std::size_t i = 0; i < ids.size(); ++i) {
        const long row = checked_id(ids[i], table.dim(0), id);
        if (row < 0) continue;
        double* dst = gt.data().data() + static_cast<std::size_t>(row) * d;
        for (std::size_t c = 0; c < d; ++c) dst[c] += g[i * d + c];
      }
      return;
    }

    case Op::Concat: {
      const std::size_t r = rows_of(y), total = cols_of(y);
      std::size_t off = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const std::size_t c = cols_of(val(k));
        Tensor& gk = acc(k);
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t j = 0; j < c; ++j) gk[i * c + j] += g[i * total + off + j];
        }
        off += c;
      }
      return;
    }

    case Op::Slice: {
      const AxisView v = axis_view(val(0).shape(), n.axis);
      const std::size_t len = n.end - n.begin;
      Tensor& ga = acc(0);
      for (std::size_t o = 0; o < v.outer; ++o) {
        for (std::size_t e = 0; e < len * v.inner; ++e) ga[(o * v.len + n.begin) * v.inner + e] += g[o * len * v.inner + e];
      }
      return;
    }

    case Op::Reshape:
    case Op::Custom: {
      Tensor& ga = acc(0);
      if (n.op == Op::Reshape) {
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        return;
      }
      const Tensor back = n.custom->backward(g, val(0), y);
      if (back.shape() != ga.shape()) shape_fail(id, n.op, "custom backward returned wrong shape");
      for (std::size_t i = 0; i < back.size(); ++i) ga[i] += back[i];
      return;
    }

    case Op::SwapLast2: {
      const Tensor& a = val(0);
      const std::size_t m = a.dim(a.rank() - 2), c = a.dim(a.rank() - 1);
      const std::size_t batch = a.size() / (m * c);
      Tensor& ga = acc(0);
      for (std::size_t b = 0; b < batch; ++b) {
        map(ga.data().data() + b * m * c, m, c) += cmap(g.data().data() + b * m * c, c, m).transpose();
      }
      return;
    }

    case Op::ReduceSum: {
      Tensor& ga = acc(0);
      for (double& v : ga.data()) v += g[0];
      return;
    }

    case Op::SumLastAxis: {
      Tensor& ga = acc(0);
      const std::size_t c = cols_of(ga);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i / c];
      return;
    }

    case Op::ExpandCols: {
      Tensor& ga = acc(0);
      for (std::size_t i = 0; i < ga.size(); ++i) {
        double total = 0.0;
        for (std::size_t j = 0; j < n.count; ++j) total += g[i * n.count + j];
        ga[i] += total;
      }
      return;
    }

    case Op::BatchedLinear: {
      const Tensor& x = val(0);
      const Tensor& w = val(1);
      const std::size_t batch = x.dim(0), in_f = cols_of(x), out_f = n.count;
      const std::size_t steps = x.size() / (batch * in_f);
      const bool wx = want(0), ww = want(1);
      double* gx = wx ? acc(0).data().data() : nullptr;
      double* gw = ww ? acc(1).data().data() : nullptr;
      if (w.dim(0) == 1) {
        auto gm = cmap(g.data().data(), batch * steps, out_f);
        if (wx) map(gx, batch * steps, in_f).noalias() += gm * cmap(w.data().data(), out_f, in_f);
        if (ww) map(gw, out_f, in_f).noalias() += gm.transpose() * cmap(x.data().data(), batch * steps, in_f);
      } else {
        for (std::size_t b = 0; b < batch; ++b) {
          auto gm = cmap(g.data().data() + b * steps * out_f, steps, out_f);
          if (wx)
            map(gx + b * steps * in_f, steps, in_f).noalias() += gm * cmap(w.data().data() + b * out_f * in_f, out_f, in_f);
          if (ww)
            map(gw + b * out_f * in_f, out_f, in_f).noalias() +=
                gm.transpose() * cmap(x.data().data() + b * steps * in_f, steps, in_f);
        }
      }
      return;
    }

    case Op::CausalAttention: {
      const Tensor& q = val(0);
      const Tensor& k = val(1);
      const Tensor& v = val(2);
      const Tensor& valid = val(3);
      const std::size_t batch = q.dim(0), L = q.dim(1), d = q.dim(2);
      const std::size_t dh = d / n.count;
      const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
      Tensor& gq = acc(0);
      Tensor& gk = acc(1);
      Tensor& gv = acc(2);
      std::vector<double> p, dp(L);
      for (std::size_t b = 0; b < batch; ++b) {
        const std::size_t base = b * L * d;
        for (std::size_t h = 0; h < n.count; ++h) {
          const std::size_t ho = h * dh;
          attention_probs(q.data().data() + base, k.data().data() + base, valid.data().data() + b * L, L, d, ho, dh, p);
          for (std::size_t i = 0; i < L; ++i) {
            double weighted = 0.0;
            for (std::size_t j = 0; j <= i; ++j) {
              const double pij = p[i * L + j];
              dp[j] = 0.0;
              if (pij == 0.0) continue;
              for (std::size_t c = 0; c < dh; ++c) {
                dp[j] += g[base + i * d + ho + c] * v[base + j * d + ho + c];
                gv[base + j * d + ho + c] += pij * g[base + i * d + ho + c];
              }
              weighted += pij * dp[j];
            }
            for (std::size_t j = 0; j <= i; ++j) {
              const double pij = p[i * L + j];
              if (pij == 0.0) continue;
              const double ds = pij * (dp[j] - weighted) * inv;
              for (std::size_t c = 0; c < dh; ++c) {
                gq[base + i * d + ho + c] += ds * k[base + j * d + ho + c];
                gk[base + j * d + ho + c] += ds * q[base + i * d + ho + c];
              }
            }
          }
        }
      }
      return;
    }

    case Op::MaxOverAxis1: {
      const Tensor& a = val(0);
      const std::size_t batch = a.dim(0), T = a.dim(1), C = a.dim(2);
      Tensor& ga = acc(0);
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t c = 0; c < C; ++c) {
          std::size_t arg = 0;
          for (std::size_t t = 1; t < T; ++t) {
            if (a[(b * T + t) * C + c] > a[(b * T + arg) * C + c]) arg = t;
          }
          ga[(b * T + arg) * C + c] += g[b * C + c];
        }
      }
      return;
    }

    case Op::Windows: {
      const Tensor& a = val(0);
      const std::size_t batch = a.dim(0), L = a.dim(1), d = a.dim(2), h = n.count;
      const std::size_t T = L - h + 1;
      Tensor& ga = acc(0);
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t t = 0; t < T; ++t) {
          for (std::size_t e = 0; e < h * d; ++e) ga[(b * L + t) * d + e] += g[(b * T + t) * h * d + e];
        }
      }
      return;
    }
  }
}

bool propagates_to(Op op, std::size_t input_index) {
  if (op == Op::Gather) return input_index == 0;
  if (op == Op::CausalAttention) return input_index < 3;
  return true;
}

}  // namespace

const Tensor& Gradients::operator[](const std::string& leaf) const {
  auto it = by_name_.find(leaf);
  if (it == by_name_.end()) throw std::out_of_range("gradients: no gradient for leaf '" + leaf + "'");
  return it->second;
}

Gradients backward_pass(const Execution& exec, std::span<const Seed> seeds, GradScope scope) {
  const Graph& graph = exec.graph();
  GradBuffers grads(exec);
  // A node needs a gradient only if some leaf of the requested scope feeds it.
  std::vector<char> requires_grad(graph.size(), 0);
  for (NodeId i = 0; i < graph.size(); ++i) {
    const Node& n = graph.node(i);
    if (n.op == Op::Param) {
      requires_grad[i] = 1;
    } else if (n.op == Op::Input) {
      requires_grad[i] = scope == GradScope::AllLeaves;
    } else {
      for (std::size_t k = 0; k < n.inputs.size(); ++k)
        if (propagates_to(n.op, k) && requires_grad[n.inputs[k]]) requires_grad[i] = 1;
    }
  }
  NodeId highest = 0;
  for (const Seed& s : seeds) {
    if (s.node >= graph.size() || !exec.computed(s.node)) throw ShapeError("backward_pass: seed on an unevaluated node");
    if (s.grad.shape() != exec.value(s.node).shape()) {
      throw ShapeError("backward_pass: seed shape " + shape_string(s.grad.shape()) + " does not match node shape " +
                       shape_string(exec.value(s.node).shape()));
    }
    Tensor& g = grads.at(s.node);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s.grad[i];
    highest = std::max(highest, s.node);
  }

  Gradients out;
  for (NodeId i = highest + 1; i-- > 0;) {
    if (!exec.computed(i) || !grads.has(i) || !requires_grad[i]) continue;
    const Node& n = graph.node(i);
    if (n.op == Op::Input || n.op == Op::Param) {
      Tensor g = grads.take(i);
      auto [it, inserted] = out.by_name_.try_emplace(n.name, std::move(g));
      if (!inserted) {
        // Same leaf name used by several nodes: sum their contributions.
        for (std::size_t k = 0; k < it->second.size(); ++k) it->second[k] += g[k];
      }
      continue;
    }
    const Tensor g = grads.take(i);
    bool any_input = false;
    for (std::size_t k = 0; k < n.inputs.size(); ++k) any_input |= propagates_to(n.op, k);
    if (n.op == Op::Fused) {
      std::vector<const Tensor*> in;
      std::vector<Tensor*> targets;
      for (NodeId j : n.inputs) {
        in.push_back(&exec.value(j));
        targets.push_back(requires_grad[j] ? &grads.at(j) : nullptr);
      }
      n.fused->backward(g, in, exec.saved_[i], targets);
      continue;
    }
    if (any_input) backprop_node(i, n, exec, g, grads, requires_grad);
  }

  for (NodeId id : graph.leaves(Op::Param)) {
    if (!exec.computed(id)) continue;
    const Node& n = graph.node(id);
    if (!out.contains(n.name)) out.by_name_.emplace(n.name, Tensor(exec.value(id).shape()));
  }
  for (const auto& [name, g] : out.by_name_) {
    if (!g.all_finite()) throw NumericError("backward_pass: non-finite gradient at leaf '" + name + "'");
  }
  return out;
}

Gradients backward_scalar(const Execution& exec, NodeId loss, GradScope scope) {
  const Tensor& value = exec.value(loss);
  if (value.size() != 1) throw ShapeError("backward_scalar: loss node is not a scalar");
  const Seed seed{loss, Tensor(value.shape(), 1.0)};
  return backward_pass(exec, std::span<const Seed>(&seed, 1), scope);
}

}  // namespace diet::num
