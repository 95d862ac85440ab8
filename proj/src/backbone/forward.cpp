// Direct (graph-free) forward pass used at serving and evaluation time.
// Only valid sequence positions are processed; padded slots of the training
// graph never influence valid ones, so both paths agree.

#include <Eigen/Dense>
#include <cmath>

#include "diet/backbone/backbone.hpp"
#include "diet/error.hpp"

namespace diet {
namespace {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;
using ConstMatMap = Eigen::Map<const Mat>;
using ConstVecMap = Eigen::Map<const Vec>;

ConstMatMap weight(const MaskedBackbone& mb, std::size_t layer) {
  const auto& l = mb.backbone().layers[layer];
  return {mb.effective(layer).data(), static_cast<Eigen::Index>(l.rows), static_cast<Eigen::Index>(l.cols)};
}

ConstVecMap dense_vec(const BackboneParams& bb, const std::string& name) {
  const auto& t = bb.dense.at(name);
  return {t.data().data(), static_cast<Eigen::Index>(t.size())};
}

// y = x W^T + b for row-major x [n, in].
Mat linear(const Mat& x, const MaskedBackbone& mb, std::size_t layer) {
  const auto& name = mb.backbone().layers[layer].name;
  Mat y = x * weight(mb, layer).transpose();
  y.rowwise() += dense_vec(mb.backbone(), name + ".bias").transpose();
  return y;
}

Mat layer_norm(const Mat& x, const BackboneParams& bb, const std::string& prefix) {
  const auto gamma = dense_vec(bb, prefix + ".gamma");
  const auto beta = dense_vec(bb, prefix + ".beta");
  Mat y(x.rows(), x.cols());
  const double c = static_cast<double>(x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    double mean = 0.0;
    for (Eigen::Index j = 0; j < x.cols(); ++j) mean += x(i, j);
    mean /= c;
    double var = 0.0;
    for (Eigen::Index j = 0; j < x.cols(); ++j) var += (x(i, j) - mean) * (x(i, j) - mean);
    var /= c;
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    for (Eigen::Index j = 0; j < x.cols(); ++j) y(i, j) = (x(i, j) - mean) * inv * gamma[j] + beta[j];
  }
  return y;
}

Mat causal_attention(const Mat& q, const Mat& k, const Mat& v, std::size_t heads) {
  const Eigen::Index n = q.rows(), d = q.cols();
  const Eigen::Index dh = d / static_cast<Eigen::Index>(heads);
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  Mat out = Mat::Zero(n, d);
  std::vector<double> p(static_cast<std::size_t>(n));
  for (Eigen::Index h = 0; h < static_cast<Eigen::Index>(heads); ++h) {
    const Eigen::Index off = h * dh;
    for (Eigen::Index i = 0; i < n; ++i) {
      double best = -std::numeric_limits<double>::infinity();
      for (Eigen::Index j = 0; j <= i; ++j) {
        double s = 0.0;
        for (Eigen::Index c = 0; c < dh; ++c) s += q(i, off + c) * k(j, off + c);
        p[j] = s * inv;
        best = std::max(best, p[j]);
      }
      double total = 0.0;
      for (Eigen::Index j = 0; j <= i; ++j) {
        p[j] = std::exp(p[j] - best);
        total += p[j];
      }
      for (Eigen::Index j = 0; j <= i; ++j) out.block(i, off, 1, dh) += (p[j] / total) * v.block(j, off, 1, dh);
    }
  }
  return out;
}

Vec sasrec_hidden(const MaskedBackbone& mb, const Sequence& seq) {
  const auto& bb = mb.backbone();
  const auto& hp = bb.hyper;
  const auto& E = bb.item_embedding();
  const auto& P = bb.dense.at("position_embedding");
  const std::size_t n = seq.size(), d = hp.d;
  const std::size_t first_slot = hp.max_len - n;
  const double emb_scale = std::sqrt(static_cast<double>(d));

  Mat x(n, d);
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t j = 0; j < d; ++j)
      x(t, j) = E.at(static_cast<std::size_t>(seq[t]), j) * emb_scale + P.at(first_slot + t, j);

  for (std::size_t b = 0; b < hp.blocks; ++b) {
    const std::string p = "block" + std::to_string(b);
    const std::size_t base = b * 6;
    const Mat a = layer_norm(x, bb, p + ".ln1");
    const Mat attn = causal_attention(linear(a, mb, base + 0), linear(a, mb, base + 1), linear(a, mb, base + 2), hp.heads);
    x += linear(attn, mb, base + 3);
    const Mat f = layer_norm(x, bb, p + ".ln2");
    x += linear(linear(f, mb, base + 4).cwiseMax(0.0), mb, base + 5);
  }
  const Mat last = layer_norm(x.bottomRows(1), bb, "final_ln");
  return last.row(0).transpose();
}

Vec caser_hidden(const MaskedBackbone& mb, const Sequence& seq) {
  const auto& bb = mb.backbone();
  const auto& hp = bb.hyper;
  const auto& E = bb.item_embedding();
  const std::size_t L = hp.max_len, d = hp.d, H = hp.max_horiz_height;
  const std::size_t first_slot = L - seq.size();

  // L x d image; slots before the sequence are zero rows.
  Mat img = Mat::Zero(L, d);
  for (std::size_t t = 0; t < seq.size(); ++t)
    for (std::size_t j = 0; j < d; ++j) img(first_slot + t, j) = E.at(static_cast<std::size_t>(seq[t]), j);

  const std::size_t nv = hp.vert_filters, nh = hp.horiz_filters;
  Vec z(nv * d + nh * H);

  // Vertical: out[f, j] = sum_t Wv[f, t] img[t, j], flattened filter-major.
  const std::size_t iv = bb.layer_index("conv_v");
  const Mat vert = weight(mb, iv) * img;
  const auto bv = dense_vec(bb, "conv_v.bias");
  for (std::size_t f = 0; f < nv; ++f)
    for (std::size_t j = 0; j < d; ++j) z[f * d + j] = vert(f, j) + bv[f];

  for (std::size_t h = 1; h <= H; ++h) {
    const std::size_t layer = h - 1;
    const auto W = weight(mb, layer);
    const auto bias = dense_vec(bb, bb.layers[layer].name + ".bias");
    for (std::size_t f = 0; f < nh; ++f) {
      double best = -std::numeric_limits<double>::infinity();
      for (std::size_t s = 0; s + h <= L; ++s) {
        const ConstVecMap window(img.data() + s * d, static_cast<Eigen::Index>(h * d));
        best = std::max(best, std::tanh(W.row(f).dot(window.transpose()) + bias[f]));
      }
      z[nv * d + (h - 1) * nh + f] = best;
    }
  }
  const std::size_t ifc = bb.layer_index("fc");
  Vec out = weight(mb, ifc) * z + dense_vec(bb, "fc.bias");
  return out.array().tanh();
}

Sequence checked_window(const MaskedBackbone& mb, std::span<const ItemId> seq) {
  if (seq.empty()) throw DataError("forward pass needs a non-empty sequence");
  const auto n_items = mb.backbone().n_items;
  for (ItemId id : seq)
    if (id < 0 || static_cast<std::size_t>(id) >= n_items)
      throw DataError("unknown item id " + std::to_string(id) + " (catalog has " + std::to_string(n_items) + ")");
  return truncate_window(seq, mb.backbone().hyper.max_len);
}

}  // namespace

std::vector<double> forward_hidden(const MaskedBackbone& mb, std::span<const ItemId> seq) {
  const Sequence window = checked_window(mb, seq);
  const Vec h = mb.backbone().arch == Arch::SASRec ? sasrec_hidden(mb, window) : caser_hidden(mb, window);
  return {h.data(), h.data() + h.size()};
}

std::vector<double> forward_scores(const MaskedBackbone& mb, std::span<const ItemId> seq) {
  const auto h = forward_hidden(mb, seq);
  const auto& E = mb.backbone().item_embedding();
  const ConstMatMap table(E.data().data(), static_cast<Eigen::Index>(E.dim(0)), static_cast<Eigen::Index>(E.dim(1)));
  const Vec scores = table * ConstVecMap(h.data(), static_cast<Eigen::Index>(h.size()));
  return {scores.data(), scores.data() + scores.size()};
}

}  // namespace diet
