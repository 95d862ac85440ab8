#include "diet/dietgen/dietgen.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cmath>
#include <functional>
#include <numeric>
#include <memory>
#include <optional>

#include "diet/error.hpp"
#include "diet/numerics/init.hpp"

namespace diet {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;
using MatMap = Eigen::Map<const RowMat>;
using VecMap = Eigen::Map<const Vec>;

MatMap as_matrix(const num::Tensor& t) {
  return {t.data().data(), static_cast<Eigen::Index>(t.dim(0)), static_cast<Eigen::Index>(t.dim(1))};
}
VecMap as_vector(std::span<const double> v) { return {v.data(), static_cast<Eigen::Index>(v.size())}; }

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

std::string gen_param_name(const std::string& layer, const std::string& what) { return "gen." + layer + "." + what; }

const num::Tensor& GeneratorStack::param(std::size_t layer, const std::string& what) const {
  auto it = params.find(gen_param_name(layers.at(layer), what));
  if (it == params.end()) throw ShapeError("generator has no parameter '" + what + "' for layer " + layers.at(layer));
  return it->second;
}

GeneratorStack build_generator_stack(const BackboneParams& bb, double keep_ratio, bool row_correction, num::Rng& rng) {
  keep_count(1, keep_ratio);  // validates the ratio
  GeneratorStack s;
  s.keep_ratio = keep_ratio;
  s.row_correction = row_correction;
  s.d = bb.hyper.d;
  s.max_len = bb.hyper.max_len;
  const std::size_t d = s.d;
  for (const auto& l : bb.layers) {
    s.layers.push_back(l.name);
    s.shapes.emplace_back(l.rows, l.cols);
    auto put = [&](const std::string& what, num::Tensor t) { s.params.emplace(gen_param_name(l.name, what), std::move(t)); };
    put("gru.w_ih", num::init_xavier_normal({3 * d, d}, rng));
    put("gru.w_hh", num::init_xavier_normal({3 * d, d}, rng));
    put("gru.b_ih", num::Tensor({3 * d}, 0.0));
    put("gru.b_hh", num::Tensor({3 * d}, 0.0));
    // Stored input-major so the graph needs no transpose; Xavier uses the
    // same fan pair either way.
    put("elem.w", num::init_xavier_normal({d, l.size()}, rng));
    put("elem.b", num::Tensor({l.size()}, 0.0));
    if (row_correction) {
      put("row.w", num::init_xavier_normal({d, l.rows}, rng));
      put("row.b", num::Tensor({l.rows}, 0.0));
    }
  }
  return s;
}

std::vector<double> gru_features(const num::Tensor& w_ih, const num::Tensor& w_hh, const num::Tensor& b_ih,
                                 const num::Tensor& b_hh, const num::Tensor& x) {
  if (x.rank() != 2 || x.dim(0) == 0) throw DataError("sequence extractor needs a non-empty [l, d] sequence");
  const std::size_t d = x.dim(1);
  if (w_ih.shape() != num::Shape{3 * d, d} || w_hh.shape() != num::Shape{3 * d, d} || b_ih.size() != 3 * d ||
      b_hh.size() != 3 * d)
    throw ShapeError("GRU weights do not match input width " + std::to_string(d));
  const auto Wi = as_matrix(w_ih);
  const auto Wh = as_matrix(w_hh);
  const auto bi = as_vector(b_ih.data());
  const auto bh = as_vector(b_hh.data());
  Vec h = Vec::Zero(static_cast<Eigen::Index>(d));
  const auto di = static_cast<Eigen::Index>(d);
  for (std::size_t t = 0; t < x.dim(0); ++t) {
    const VecMap xt(x.data().data() + t * d, di);
    const Vec gi = Wi * xt + bi;
    const Vec gh = Wh * h + bh;
    for (Eigen::Index j = 0; j < di; ++j) {
      const double r = sigmoid(gi[j] + gh[j]);
      const double z = sigmoid(gi[di + j] + gh[di + j]);
      const double n = std::tanh(gi[2 * di + j] + r * gh[2 * di + j]);
      h[j] = (1.0 - z) * n + z * h[j];
    }
  }
  return {h.data(), h.data() + h.size()};
}

std::vector<double> extract_features(const GeneratorStack& stack, std::size_t layer, const num::Tensor& seq_embeddings) {
  return gru_features(stack.param(layer, "gru.w_ih"), stack.param(layer, "gru.w_hh"), stack.param(layer, "gru.b_ih"),
                      stack.param(layer, "gru.b_hh"), seq_embeddings);
}

std::vector<double> element_scores(const num::Tensor& w, const num::Tensor& b, std::span<const double> g) {
  if (w.rank() != 2 || w.dim(0) != g.size() || b.size() != w.dim(1))
    throw ShapeError("element hypernet expects [" + std::to_string(g.size()) + ", n] weights, got " +
                     num::shape_string(w.shape()));
  const Vec s = as_matrix(w).transpose() * as_vector(g) + as_vector(b.data());
  return {s.data(), s.data() + s.size()};
}

std::vector<double> softmax(std::span<const double> logits) {
  if (logits.empty()) throw ShapeError("softmax of an empty vector");
  const double m = *std::max_element(logits.begin(), logits.end());
  std::vector<double> out(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) total += out[i] = std::exp(logits[i] - m);
  for (double& v : out) v /= total;
  return out;
}

std::vector<double> row_importance(const num::Tensor& w, const num::Tensor& b, std::span<const double> g) {
  return softmax(element_scores(w, b, g));
}

std::vector<double> correct_scores(std::span<const double> scores, std::size_t rows, std::size_t cols,
                                   std::span<const double> r) {
  if (r.size() != rows || scores.size() != rows * cols)
    throw ShapeError("row importance of length " + std::to_string(r.size()) + " does not fit a " +
                     std::to_string(rows) + "x" + std::to_string(cols) + " score map");
  std::vector<double> out(scores.size());
  for (std::size_t a = 0; a < rows; ++a)
    for (std::size_t b = 0; b < cols; ++b) out[a * cols + b] = scores[a * cols + b] * r[a];
  return out;
}

namespace {

// Writes the top-k mask of |s| into out. The k-th largest magnitude is found
// by selection; ties at that threshold go to the lowest indices.
// k-th largest |s| by two radix passes over the abs bit pattern, which is
// monotone for non-negative doubles: the exponent, then the top 11 mantissa
// bits, then selection among the few survivors.
double kth_largest_abs(std::span<const double> s, std::size_t k, std::vector<std::uint64_t>& keys,
                       std::vector<double>& tail) {
  const std::size_t n = s.size();
  keys.resize(n);
  std::array<std::uint32_t, 2048> hist{};
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint64_t u = std::bit_cast<std::uint64_t>(s[i]) & 0x7fffffffffffffffULL;
    if ((u >> 52) == 2047) throw NumericError("non-finite score at index " + std::to_string(i));
    keys[i] = u;
    ++hist[u >> 52];
  }
  std::size_t need = k;
  std::size_t hi = hist.size();
  while (hist[--hi] < need) need -= hist[hi];
  std::array<std::uint32_t, 2048> hist2{};
  std::size_t m = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint64_t u = keys[i];
    const bool in = (u >> 52) == hi;
    keys[m] = u;
    m += in;
    hist2[in ? (u >> 41) & 2047 : 0] += in;
  }
  std::size_t lo = hist2.size();
  while (hist2[--lo] < need) need -= hist2[lo];
  tail.clear();
  for (std::size_t i = 0; i < m; ++i)
    if (((keys[i] >> 41) & 2047) == lo) tail.push_back(std::bit_cast<double>(keys[i]));
  std::nth_element(tail.begin(), tail.begin() + static_cast<std::ptrdiff_t>(need - 1), tail.end(), std::greater<>());
  return tail[need - 1];
}

// Writes the top-k-by-magnitude indicator of `s` into `out`. Ties at the
// threshold go to the lowest indices.
template <typename T>
void topk_into(std::span<const double> s, std::size_t k, std::span<T> out, std::vector<std::uint64_t>& keys,
               std::vector<double>& tail) {
  const std::size_t n = s.size();
  const double t = kth_largest_abs(s, k, keys, tail);
  if (k == n) {
    std::fill(out.begin(), out.end(), T{1});
    return;
  }
  std::size_t above = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const bool keep = std::abs(s[i]) > t;
    out[i] = keep ? T{1} : T{0};
    above += keep;
  }
  for (std::size_t i = 0, ties = k - above; ties > 0; ++i)
    if (std::abs(s[i]) == t) {
      out[i] = T{1};
      --ties;
    }
}

}  // namespace

std::vector<std::uint8_t> binarize_topk(std::span<const double> s, double keep_ratio) {
  const std::size_t k = keep_count(s.size(), keep_ratio);
  std::vector<std::uint8_t> mask(s.size(), 0);
  std::vector<std::uint64_t> keys;
  std::vector<double> tail;
  topk_into(s, k, std::span<std::uint8_t>(mask), keys, tail);
  return mask;
}

std::vector<double> ste_backward(std::span<const double> upstream_on_effective, std::span<const double> frozen_w) {
  if (upstream_on_effective.size() != frozen_w.size()) throw ShapeError("STE: upstream and weight sizes differ");
  std::vector<double> out(frozen_w.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = upstream_on_effective[i] * frozen_w[i];
  return out;
}

num::Tensor window_embeddings(const BackboneParams& bb, std::span<const ItemId> seq) {
  if (seq.empty()) throw DataError("diet generation needs a non-empty sequence");
  const Sequence window = truncate_window(seq, bb.hyper.max_len);
  const auto& E = bb.item_embedding();
  const std::size_t d = E.dim(1);
  num::Tensor x({window.size(), d});
  for (std::size_t t = 0; t < window.size(); ++t) {
    const ItemId id = window[t];
    if (id < 0 || static_cast<std::size_t>(id) >= bb.n_items) throw DataError("unknown item id " + std::to_string(id));
    std::copy_n(E.data().begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(id) * d), d,
                x.data().begin() + static_cast<std::ptrdiff_t>(t * d));
  }
  return x;
}

Diet generate_diet(const GeneratorStack& stack, std::span<const ItemId> seq, const BackboneParams& bb) {
  if (stack.layers.size() != bb.layers.size()) throw ShapeError("generator stack does not match the backbone registry");
  const num::Tensor x = window_embeddings(bb, seq);
  Diet diet;
  diet.keep_ratio = stack.keep_ratio;
  for (std::size_t i = 0; i < bb.layers.size(); ++i) {
    const auto& l = bb.layers[i];
    if (stack.layers[i] != l.name) throw ShapeError("generator layer '" + stack.layers[i] + "' != '" + l.name + "'");
    const auto g = extract_features(stack, i, x);
    auto s = element_scores(stack.param(i, "elem.w"), stack.param(i, "elem.b"), g);
    if (stack.row_correction) {
      const auto r = row_importance(stack.param(i, "row.w"), stack.param(i, "row.b"), g);
      s = correct_scores(s, l.rows, l.cols, r);
    }
    diet.layers.push_back(
        LayerMask{l.name, l.rows, l.cols, keep_count(l.size(), stack.keep_ratio), binarize_topk(s, stack.keep_ratio)});
  }
  return diet;
}

Diet diet_from_scores(const BackboneParams& bb, const std::vector<std::vector<double>>& scores, double keep_ratio) {
  if (scores.size() != bb.layers.size()) throw ShapeError("one score map per layer required");
  Diet diet;
  diet.keep_ratio = keep_ratio;
  for (std::size_t i = 0; i < bb.layers.size(); ++i) {
    const auto& l = bb.layers[i];
    if (scores[i].size() != l.size()) throw ShapeError("score map for '" + l.name + "' has the wrong size");
    diet.layers.push_back(
        LayerMask{l.name, l.rows, l.cols, keep_count(l.size(), keep_ratio), binarize_topk(scores[i], keep_ratio)});
  }
  return diet;
}

void dieting_bind(std::shared_ptr<std::vector<double>> buffer, BackboneParams& bb) {
  if (!buffer) throw ShapeError("DIETING: null buffer");
  if (buffer->size() < bb.largest_layer())
    throw ShapeError("DIETING: buffer of " + std::to_string(buffer->size()) + " entries is smaller than layer size " +
                     std::to_string(bb.largest_layer()));
  for (auto& l : bb.layers) l.storage = buffer;
  bb.shared_buffer = true;
}

BackboneParams make_dieting_backbone(const BackboneParams& bb, num::Rng& rng) {
  BackboneParams out = bb;
  const LayerWeights* largest = &bb.layers.front();
  for (const auto& l : bb.layers)
    if (l.size() > largest->size()) largest = &l;
  num::Tensor w = num::init_xavier_normal({largest->rows, largest->cols}, rng);
  dieting_bind(std::make_shared<std::vector<double>>(std::move(w.storage())), out);
  return out;
}

// --------------------------------------------------------------- graph side

std::shared_ptr<const num::CustomGrad> topk_ste(double keep_ratio) {
  keep_count(1, keep_ratio);
  return std::make_shared<num::CustomGrad>(num::CustomGrad{
      "topk-ste",
      [keep_ratio](const num::Tensor& s) {
        const std::size_t n = s.shape().back();
        const std::size_t rows = s.size() / n;
        const std::size_t k = keep_count(n, keep_ratio);
        num::Tensor out(s.shape());
        std::vector<std::uint64_t> keys;
        std::vector<double> tail;
        for (std::size_t r = 0; r < rows; ++r)
          topk_into(s.data().subspan(r * n, n), k, out.data().subspan(r * n, n), keys, tail);
        return out;
      },
      [](const num::Tensor& upstream, const num::Tensor&, const num::Tensor&) { return upstream; }});
}

namespace {

// GRU over [B, L, d] with per-step validity; padded steps keep h unchanged.
num::NodeId gru_graph(num::Graph& g, const GeneratorStack& stack, std::size_t layer, num::NodeId seq_emb,
                      num::NodeId valid, std::size_t L) {
  const std::size_t d = stack.d;
  const auto& name = stack.layers[layer];
  const auto w_ih = g.param(gen_param_name(name, "gru.w_ih"));
  const auto w_hh = g.param(gen_param_name(name, "gru.w_hh"));
  const auto b_ih = g.param(gen_param_name(name, "gru.b_ih"));
  const auto b_hh = g.param(gen_param_name(name, "gru.b_hh"));
  std::optional<num::NodeId> h;
  for (std::size_t t = 0; t < L; ++t) {
    const auto x = g.reshape(g.slice(seq_emb, 1, t, t + 1), {0, d});
    const auto gi = g.add(g.matmul(x, w_ih, true), b_ih);
    // Without a previous state the recurrent term reduces to the bias, a
    // row vector that broadcasts over the batch.
    const num::NodeId gh = h ? g.add(g.matmul(*h, w_hh, true), b_hh) : b_hh;
    const std::size_t gh_axis = h ? 1 : 0;
    auto gi_gate = [&](std::size_t k) { return g.slice(gi, 1, k * d, (k + 1) * d); };
    auto gh_gate = [&](std::size_t k) { return g.slice(gh, gh_axis, k * d, (k + 1) * d); };
    const auto r = g.sigmoid(g.add(gi_gate(0), gh_gate(0)));
    const auto z = g.sigmoid(g.add(gi_gate(1), gh_gate(1)));
    const auto n = g.tanh(g.add(gi_gate(2), g.mul(r, gh_gate(2))));
    const auto v = g.expand_cols(g.slice(valid, 1, t, t + 1), d);
    if (h) {
      // h' = n + z (h - n); blended: h + v (h' - h)
      const auto cand = g.add(n, g.mul(z, g.sub(*h, n)));
      h = g.add(*h, g.mul(v, g.sub(cand, *h)));
    } else {
      const auto cand = g.sub(n, g.mul(z, n));
      h = g.mul(v, cand);
    }
  }
  return *h;
}

}  // namespace

std::shared_ptr<const num::FusedOp> fused_diet_head(double keep_ratio, std::size_t cols, bool row_correction) {
  keep_count(1, keep_ratio);
  if (cols == 0) throw ShapeError("fused diet head: zero columns");
  using Mut = Eigen::Map<RowMat>;
  auto forward = [=](std::span<const num::Tensor* const> in) {
    const num::Tensor& feat = *in[0];
    const num::Tensor& W = *in[1];
    const num::Tensor& b = *in[2];
    const num::Tensor& w = *in[3];
    const std::size_t B = feat.dim(0), d = feat.dim(1), n = W.dim(1);
    if (W.dim(0) != d || b.size() != n || w.size() != n || (row_correction && in[4]->size() != B * (n / cols)))
      throw ShapeError("fused diet head: inconsistent operand shapes");
    const auto Bi = static_cast<Eigen::Index>(B), ni = static_cast<Eigen::Index>(n);
    num::Tensor S({B, n});
    Mut(S.data().data(), Bi, ni).noalias() = as_matrix(feat) * as_matrix(W);
    for (std::size_t r = 0; r < B; ++r)
      for (std::size_t j = 0; j < n; ++j) S[r * n + j] += b[j];
    num::Tensor out({B, n});
    num::Tensor M({B, n});
    const std::size_t k = keep_count(n, keep_ratio);
    std::vector<std::uint64_t> keys;
    std::vector<double> tail;
    const std::size_t rows = n / cols;
    for (std::size_t r = 0; r < B; ++r) {
      double* o = out.data().data() + r * n;
      const double* srow = S.data().data() + r * n;
      if (row_correction) {
        const double* imp = in[4]->data().data() + r * rows;
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < cols; ++j) o[i * cols + j] = srow[i * cols + j] * imp[i];
      } else {
        std::copy_n(srow, n, o);
      }
      double* mrow = M.data().data() + r * n;
      topk_into(std::span<const double>(o, n), k, std::span<double>(mrow, n), keys, tail);
      for (std::size_t j = 0; j < n; ++j) o[j] = mrow[j] * w[j];
    }
    std::vector<num::Tensor> result;
    result.push_back(std::move(out));
    result.push_back(std::move(S));
    result.push_back(std::move(M));
    return result;
  };
  auto backward = [=](const num::Tensor& G, std::span<const num::Tensor* const> in, std::span<const num::Tensor> saved,
                      std::span<num::Tensor* const> grads) {
    const num::Tensor& feat = *in[0];
    const num::Tensor& W = *in[1];
    const num::Tensor& w = *in[3];
    const num::Tensor& S = saved[0];
    const num::Tensor& M = saved[1];
    const std::size_t B = feat.dim(0), n = W.dim(1);
    if (num::Tensor* gw = grads[3])
      for (std::size_t r = 0; r < B; ++r)
        for (std::size_t j = 0; j < n; ++j) (*gw)[j] += G[r * n + j] * M[r * n + j];
    const bool need_scores = grads[0] || grads[1] || grads[2] || (row_correction && grads[4]);
    if (!need_scores) return;
    // Straight-through: the gradient on S~ is the upstream times the weight.
    num::Tensor dS({B, n});
    for (std::size_t r = 0; r < B; ++r)
      for (std::size_t j = 0; j < n; ++j) dS[r * n + j] = G[r * n + j] * w[j];
    if (row_correction) {
      const num::Tensor& imp = *in[4];
      const std::size_t rows = n / cols;
      num::Tensor* gi = grads[4];
      for (std::size_t r = 0; r < B; ++r) {
        for (std::size_t i = 0; i < rows; ++i) {
          const std::size_t base = r * n + i * cols;
          if (gi) {
            double acc = 0.0;
            for (std::size_t j = 0; j < cols; ++j) acc += dS[base + j] * S[base + j];
            (*gi)[r * rows + i] += acc;
          }
          const double v = imp[r * rows + i];
          for (std::size_t j = 0; j < cols; ++j) dS[base + j] *= v;
        }
      }
    }
    const auto Bi = static_cast<Eigen::Index>(B), ni = static_cast<Eigen::Index>(n);
    const auto di = static_cast<Eigen::Index>(feat.dim(1));
    if (num::Tensor* gb = grads[2])
      for (std::size_t r = 0; r < B; ++r)
        for (std::size_t j = 0; j < n; ++j) (*gb)[j] += dS[r * n + j];
    if (num::Tensor* gW = grads[1]) Mut(gW->data().data(), di, ni).noalias() += as_matrix(feat).transpose() * as_matrix(dS);
    if (num::Tensor* gf = grads[0]) Mut(gf->data().data(), Bi, di).noalias() += as_matrix(dS) * as_matrix(W).transpose();
  };
  return std::make_shared<num::FusedOp>(num::FusedOp{"diet-head", forward, backward});
}

GeneratorNodes add_generator_graph(num::Graph& g, const GeneratorStack& stack, num::NodeId seq_emb, num::NodeId valid,
                                   const std::vector<num::NodeId>& weights, bool fused) {
  if (weights.size() != stack.layers.size()) throw ShapeError("generator graph: one weight node per layer required");
  const auto ste = topk_ste(stack.keep_ratio);
  GeneratorNodes out;
  for (std::size_t i = 0; i < stack.layers.size(); ++i) {
    const auto& name = stack.layers[i];
    const std::size_t cols = stack.shapes[i].second;
    const auto feat = gru_graph(g, stack, i, seq_emb, valid, stack.max_len);
    const auto elem_w = g.param(gen_param_name(name, "elem.w"));
    const auto elem_b = g.param(gen_param_name(name, "elem.b"));
    std::optional<num::NodeId> importance;
    if (stack.row_correction) {
      const auto logits =
          g.add(g.matmul(feat, g.param(gen_param_name(name, "row.w"))), g.param(gen_param_name(name, "row.b")));
      importance = g.softmax_rows(logits);
    }
    if (fused) {
      std::vector<num::NodeId> in{feat, elem_w, elem_b, weights[i]};
      if (importance) in.push_back(*importance);
      out.effective.push_back(g.fused(std::move(in), fused_diet_head(stack.keep_ratio, cols, stack.row_correction)));
      continue;
    }
    auto s = g.add(g.matmul(feat, elem_w), elem_b);
    if (importance) s = g.mul(s, g.expand_cols(*importance, cols));
    const auto mask = g.custom(s, ste);
    out.scores.push_back(s);
    out.masks.push_back(mask);
    out.effective.push_back(g.mul(mask, weights[i]));
  }
  return out;
}

}  // namespace diet
