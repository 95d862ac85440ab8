#pragma once

// One small random instance per graph primitive, each reduced to a scalar
// loss sum(op(...) * probe) with a random probe so every output entry carries
// a distinct upstream gradient.

#include <cmath>
#include <functional>
#include <span>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "gradcheck.hpp"

namespace diet::testing {

struct PrimitiveCase {
  std::string name;
  num::Graph graph;
  num::NodeId loss = 0;
  std::map<std::string, num::Tensor> values;
  std::vector<std::string> leaves;
};

namespace detail {

// Finishes a case: evaluates the op node once to size the probe.
inline PrimitiveCase finish(std::string name, num::Graph g, num::NodeId y, std::map<std::string, num::Tensor> values,
                            std::vector<std::string> leaves, num::Rng& rng) {
  num::Bindings b;
  for (auto& [k, v] : values) b.bind(k, v);
  const num::NodeId outs[] = {y};
  const num::Shape shape = num::forward_eval(g, b, outs).value(y).shape();
  const num::NodeId probe = g.input("probe");
  const num::NodeId loss = g.reduce_sum(g.mul(y, probe));
  values["probe"] = random_tensor(shape, rng);
  PrimitiveCase c{std::move(name), std::move(g), loss, std::move(values), std::move(leaves)};
  return c;
}

// Values bounded away from zero so relu's kink is never straddled.
inline num::Tensor away_from_zero(num::Shape shape, num::Rng& rng) {
  num::Tensor t(std::move(shape));
  for (double& v : t.data()) v = (rng.uniform() < 0.5 ? -1.0 : 1.0) * (0.1 + 0.9 * rng.uniform());
  return t;
}

}  // namespace detail

inline std::vector<PrimitiveCase> primitive_cases(num::Rng& rng) {
  using detail::finish;
  using num::Tensor;
  std::vector<PrimitiveCase> cases;

  auto binary = [&](const std::string& name, num::Shape sa, num::Shape sb,
                    std::function<num::NodeId(num::Graph&, num::NodeId, num::NodeId)> op) {
    num::Graph g;
    const auto a = g.param("a");
    const auto b = g.param("b");
    const auto y = op(g, a, b);
    cases.push_back(finish(name, std::move(g), y, {{"a", random_tensor(sa, rng)}, {"b", random_tensor(sb, rng)}},
                           {"a", "b"}, rng));
  };
  auto unary = [&](const std::string& name, Tensor x, std::function<num::NodeId(num::Graph&, num::NodeId)> op) {
    num::Graph g;
    const auto a = g.param("a");
    const auto y = op(g, a);
    cases.push_back(finish(name, std::move(g), y, {{"a", std::move(x)}}, {"a"}, rng));
  };

  binary("matmul", {3, 4}, {4, 2}, [](num::Graph& g, auto a, auto b) { return g.matmul(a, b); });
  binary("matmul-transpose-b", {3, 4}, {2, 4}, [](num::Graph& g, auto a, auto b) { return g.matmul(a, b, true); });
  binary("add", {3, 4}, {3, 4}, [](num::Graph& g, auto a, auto b) { return g.add(a, b); });
  binary("add-row-broadcast", {2, 3, 4}, {4}, [](num::Graph& g, auto a, auto b) { return g.add(a, b); });
  binary("sub-row-broadcast", {3, 4}, {1, 4}, [](num::Graph& g, auto a, auto b) { return g.sub(a, b); });
  binary("mul", {3, 4}, {3, 4}, [](num::Graph& g, auto a, auto b) { return g.mul(a, b); });
  binary("mul-row-broadcast", {3, 4}, {1, 4}, [](num::Graph& g, auto a, auto b) { return g.mul(a, b); });

  unary("scale", random_tensor({3, 4}, rng), [](num::Graph& g, auto a) { return g.scale(a, -2.5); });
  unary("tanh", random_tensor({3, 4}, rng, 2.0), [](num::Graph& g, auto a) { return g.tanh(a); });
  unary("sigmoid", random_tensor({3, 4}, rng, 3.0), [](num::Graph& g, auto a) { return g.sigmoid(a); });
  unary("relu", detail::away_from_zero({3, 4}, rng), [](num::Graph& g, auto a) { return g.relu(a); });
  unary("softplus", random_tensor({3, 4}, rng, 3.0), [](num::Graph& g, auto a) { return g.softplus(a); });
  unary("softmax-rows", random_tensor({3, 5}, rng, 2.0), [](num::Graph& g, auto a) { return g.softmax_rows(a); });
  unary("layer-norm-rows", random_tensor({3, 5}, rng), [](num::Graph& g, auto a) { return g.layer_norm_rows(a, 1e-5); });
  unary("slice-axis1", random_tensor({2, 4, 3}, rng), [](num::Graph& g, auto a) { return g.slice(a, 1, 1, 3); });
  unary("slice-last", random_tensor({2, 4, 3}, rng), [](num::Graph& g, auto a) { return g.slice(a, 2, 0, 2); });
  unary("reshape", random_tensor({2, 6}, rng), [](num::Graph& g, auto a) { return g.reshape(a, {3, 0}); });
  unary("swap-last2", random_tensor({2, 3, 4}, rng), [](num::Graph& g, auto a) { return g.swap_last2(a); });
  unary("reduce-sum", random_tensor({3, 4}, rng), [](num::Graph& g, auto a) { return g.reduce_sum(a); });
  unary("sum-last-axis", random_tensor({2, 3, 4}, rng), [](num::Graph& g, auto a) { return g.sum_last_axis(a); });
  unary("expand-cols", random_tensor({2, 3}, rng), [](num::Graph& g, auto a) { return g.expand_cols(a, 4); });
  unary("max-over-axis1", random_tensor({2, 4, 3}, rng), [](num::Graph& g, auto a) { return g.max_over_axis1(a); });
  unary("windows", random_tensor({2, 5, 3}, rng), [](num::Graph& g, auto a) { return g.windows(a, 2); });

  {
    auto square = std::make_shared<num::CustomGrad>(num::CustomGrad{
        "square",
        [](const Tensor& x) {
          Tensor y(x.shape());
          for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * x[i];
          return y;
        },
        [](const Tensor& up, const Tensor& x, const Tensor&) {
          Tensor gx(x.shape());
          for (std::size_t i = 0; i < x.size(); ++i) gx[i] = 2.0 * x[i] * up[i];
          return gx;
        }});
    unary("custom-grad", random_tensor({3, 4}, rng), [square](num::Graph& g, auto a) { return g.custom(a, square); });
  }

  {
    // Fused tanh(a) * b with a saved tanh(a) for the backward pass.
    auto op = std::make_shared<num::FusedOp>(num::FusedOp{
        "tanh-mul",
        [](std::span<const num::Tensor* const> in) {
          Tensor t(in[0]->shape()), y(in[0]->shape());
          for (std::size_t i = 0; i < t.size(); ++i) {
            t[i] = std::tanh((*in[0])[i]);
            y[i] = t[i] * (*in[1])[i];
          }
          return std::vector<Tensor>{y, t};
        },
        [](const Tensor& up, std::span<const num::Tensor* const> in, std::span<const Tensor> saved,
           std::span<Tensor* const> grads) {
          const Tensor& t = saved[0];
          for (std::size_t i = 0; i < t.size(); ++i) {
            if (grads[0]) (*grads[0])[i] += up[i] * (1.0 - t[i] * t[i]) * (*in[1])[i];
            if (grads[1]) (*grads[1])[i] += up[i] * t[i];
          }
        }});
    binary("fused", {3, 4}, {3, 4}, [op](num::Graph& g, auto a, auto b) { return g.fused({a, b}, op); });
  }
  {
    num::Graph g;
    const auto table = g.param("table");
    const auto ids = g.input("ids");
    const auto y = g.gather(table, ids);
    cases.push_back(finish("embedding-gather", std::move(g), y,
                           {{"table", random_tensor({6, 4}, rng)}, {"ids", Tensor({2, 3}, {0, 5, -1, 2, 2, 3})}},
                           {"table"}, rng));
  }
  {
    num::Graph g;
    const auto a = g.param("a");
    const auto b = g.param("b");
    const auto c = g.param("c");
    const auto y = g.concat({a, b, c});
    cases.push_back(finish("concat", std::move(g), y,
                           {{"a", random_tensor({2, 3}, rng)}, {"b", random_tensor({2, 2}, rng)}, {"c", random_tensor({2, 1}, rng)}},
                           {"a", "b", "c"}, rng));
  }
  binary("batched-linear-shared", {2, 5, 4}, {1, 12},
         [](num::Graph& g, auto x, auto w) { return g.batched_linear(x, w, 3); });
  binary("batched-linear-per-sample", {2, 5, 4}, {2, 12},
         [](num::Graph& g, auto x, auto w) { return g.batched_linear(x, w, 3); });
  binary("batched-linear-rank2", {3, 4}, {3, 8}, [](num::Graph& g, auto x, auto w) { return g.batched_linear(x, w, 2); });
  {
    num::Graph g;
    const auto q = g.param("q");
    const auto k = g.param("k");
    const auto v = g.param("v");
    const auto valid = g.input("valid");
    const auto y = g.causal_attention(q, k, v, valid, 2);
    cases.push_back(finish("causal-attention", std::move(g), y,
                           {{"q", random_tensor({2, 4, 6}, rng)},
                            {"k", random_tensor({2, 4, 6}, rng)},
                            {"v", random_tensor({2, 4, 6}, rng)},
                            {"valid", Tensor({2, 4}, {1, 1, 1, 1, 0, 0, 1, 1})}},
                           {"q", "k", "v"}, rng));
  }
  return cases;
}

}  // namespace diet::testing
