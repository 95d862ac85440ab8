#include "diet/trainer/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>

#include "diet/backbone/backbone_graph.hpp"
#include "diet/backbone/checkpoint.hpp"
#include "diet/error.hpp"
#include "diet/numerics/init.hpp"
#include "json.hpp"

namespace diet {

TrainMode parse_train_mode(std::string_view name) {
  std::string s(name);
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  if (s == "base") return TrainMode::Base;
  if (s == "mask-only" || s == "mask" || s == "+mask") return TrainMode::MaskOnly;
  if (s == "mg" || s == "+mg") return TrainMode::MG;
  if (s == "diet") return TrainMode::Diet;
  if (s == "dieting") return TrainMode::Dieting;
  if (s == "random-prune" || s == "random") return TrainMode::RandomPrune;
  throw ConfigError("unknown mode '" + std::string(name) + "'");
}

std::string_view train_mode_name(TrainMode m) {
  switch (m) {
    case TrainMode::Base: return "base";
    case TrainMode::MaskOnly: return "mask-only";
    case TrainMode::MG: return "mg";
    case TrainMode::Diet: return "diet";
    case TrainMode::Dieting: return "dieting";
    case TrainMode::RandomPrune: return "random-prune";
  }
  return "?";
}

void validate(const TrainConfig& c) {
  if (!(c.keep_ratio > 0.0 && c.keep_ratio <= 1.0)) throw ConfigError("keep_ratio must lie in (0, 1]");
  if (!(c.lr_base > 0.0) || !std::isfinite(c.lr_base)) throw ConfigError("lr_base must be positive");
  if (c.batch_size == 0) throw ConfigError("batch_size must be positive");
  if (c.cycle_length == 1) throw ConfigError("cycle_length must be at least 2 (or 0 for one cycle per run)");
  if (c.negatives_per_positive == 0) throw ConfigError("at least one negative per positive is required");
}

namespace {

double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

}  // namespace

double compute_loss(std::span<const double> scores, ItemId target, std::span<const ItemId> negatives) {
  if (negatives.empty()) throw ConfigError("compute_loss needs at least one negative");
  auto at = [&](ItemId i) {
    if (i < 0 || static_cast<std::size_t>(i) >= scores.size()) throw DataError("item id outside the score vector");
    return scores[static_cast<std::size_t>(i)];
  };
  double loss = softplus(-at(target));
  for (ItemId n : negatives) {
    if (n == target) throw ConfigError("a negative equals the target item");
    loss += softplus(at(n));
  }
  if (!std::isfinite(loss)) throw NumericError("non-finite loss");
  return loss;
}

double triangular_lr(std::size_t step, double lr_base, std::size_t cycle_length) {
  if (cycle_length < 2) throw ConfigError("cycle_length must be at least 2");
  const double pos = static_cast<double>(step % cycle_length) / static_cast<double>(cycle_length);
  return lr_base * (1.0 - std::abs(2.0 * pos - 1.0));
}

void adam_step(ParamSet& params, const std::map<std::string, num::Tensor>& grads, AdamState& state, double lr) {
  for (const auto& [name, g] : grads) {
    auto it = params.find(name);
    if (it == params.end()) continue;
    if (g.shape() != it->second.shape()) throw ShapeError("adam: gradient shape mismatch for '" + name + "'");
    if (!g.all_finite()) throw NumericError("adam: non-finite gradient for '" + name + "'");
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (auto& [name, p] : params) {
    auto git = grads.find(name);
    if (git == grads.end()) continue;
    const auto& g = git->second;
    auto& m = state.m.try_emplace(name, p.shape()).first->second;
    auto& v = state.v.try_emplace(name, p.shape()).first->second;
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
      p[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + state.eps);
    }
  }
}

// ------------------------------------------------------------------ model

Diet Model::diet_for(std::span<const ItemId> seq) const {
  switch (mode) {
    case TrainMode::Base: return full_diet(backbone);
    case TrainMode::MaskOnly:
    case TrainMode::RandomPrune:
      if (!fixed_diet) throw ConfigError("model has no fixed diet");
      return *fixed_diet;
    case TrainMode::MG:
    case TrainMode::Diet:
    case TrainMode::Dieting:
      if (!stack) throw ConfigError("model has no generator stack");
      return generate_diet(*stack, seq, backbone);
  }
  throw ConfigError("unknown mode");
}

std::vector<double> Model::scores_for(std::span<const ItemId> seq) const {
  return forward_scores(apply_diet(backbone, diet_for(seq)), seq);
}

// --------------------------------------------------------------- training

namespace {

constexpr const char* kTargetInput = "batch.target";
std::string negative_input(std::size_t j) { return "batch.negative" + std::to_string(j); }
std::string weight_name(const std::string& layer) { return "w." + layer; }
std::string score_name(const std::string& layer) { return "score." + layer; }
std::string mask_name(const std::string& layer) { return "mask." + layer; }
constexpr const char* kWMax = "w_max";
constexpr const char* kItemEmbedding = "item_embedding";

bool uses_generator(TrainMode m) { return m == TrainMode::MG || m == TrainMode::Diet || m == TrainMode::Dieting; }
bool trains_backbone(TrainMode m) { return m == TrainMode::Base || m == TrainMode::RandomPrune; }

num::Tensor row_tensor(std::span<const double> values) {
  return num::Tensor({1, values.size()}, std::vector<double>(values.begin(), values.end()));
}

struct TrainGraph {
  num::Graph g;
  num::NodeId loss = 0;
};

TrainGraph build_train_graph(const TrainConfig& cfg, const BackboneParams& bb, const GeneratorStack* stack) {
  TrainGraph tg;
  auto& g = tg.g;
  const TrainMode mode = cfg.mode;
  const auto dense = add_dense_leaves(g, bb, [&](const std::string& name) {
    return trains_backbone(mode) || (cfg.train_item_embedding && name == kItemEmbedding);
  });
  BackboneGraph io = add_backbone_inputs(g, dense);

  std::vector<num::NodeId> weights;
  for (const auto& l : bb.layers) {
    if (trains_backbone(mode)) {
      weights.push_back(g.param(weight_name(l.name)));
    } else if (mode == TrainMode::Dieting) {
      weights.push_back(0);  // slices of w_max, filled below
    } else {
      weights.push_back(g.input(weight_name(l.name)));
    }
  }
  if (mode == TrainMode::Dieting) {
    // Every layer reads a prefix of the one trainable buffer.
    const auto wmax = g.param(kWMax);
    for (std::size_t i = 0; i < bb.layers.size(); ++i) weights[i] = g.slice(wmax, 1, 0, bb.layers[i].size());
  }

  std::vector<num::NodeId> effective;
  switch (mode) {
    case TrainMode::Base: effective = weights; break;
    case TrainMode::RandomPrune:
      for (std::size_t i = 0; i < bb.layers.size(); ++i)
        effective.push_back(g.mul(g.input(mask_name(bb.layers[i].name)), weights[i]));
      break;
    case TrainMode::MaskOnly: {
      const auto ste = topk_ste(cfg.keep_ratio);
      for (std::size_t i = 0; i < bb.layers.size(); ++i)
        effective.push_back(g.mul(g.custom(g.param(score_name(bb.layers[i].name)), ste), weights[i]));
      break;
    }
    case TrainMode::MG:
    case TrainMode::Diet:
    case TrainMode::Dieting: {
      const auto seq_emb = g.gather(io.item_embedding, io.ids);
      effective = add_generator_graph(g, *stack, seq_emb, io.valid, weights, true).effective;
      break;
    }
  }
  add_backbone_forward(g, bb, io, effective, dense);

  auto score_of = [&](num::NodeId ids) { return g.sum_last_axis(g.mul(io.hidden, g.gather(io.item_embedding, ids))); };
  num::NodeId total = g.softplus(g.scale(score_of(g.input(kTargetInput)), -1.0));
  for (std::size_t j = 0; j < cfg.negatives_per_positive; ++j)
    total = g.add(total, g.softplus(score_of(g.input(negative_input(j)))));
  tg.loss = g.reduce_sum(total);
  return tg;
}

}  // namespace

FitResult fit(const TrainConfig& config, const Split& train, const BackboneParams& backbone,
              const EpochCallback& on_epoch) {
  validate(config);
  const auto samples = build_sequences(train, backbone.hyper.max_len);
  if (samples.empty()) throw DataError("training split has no (context, target) samples");
  if (backbone.n_items < 2) throw DataError("negative sampling needs at least two items");

  num::Rng rng(config.seed);
  num::Rng init_rng = rng.fork();
  const TrainMode mode = config.mode;

  Model model;
  model.mode = mode;
  model.keep_ratio = mode == TrainMode::Base ? 1.0 : config.keep_ratio;
  model.backbone = mode == TrainMode::Dieting ? make_dieting_backbone(backbone, init_rng) : backbone;
  const BackboneParams& bb = model.backbone;
  const BackboneParams frozen_snapshot = bb;

  ParamSet params;
  std::map<std::string, num::Tensor> inputs;  // constant per run
  if (uses_generator(mode)) {
    model.stack = build_generator_stack(bb, config.keep_ratio, mode != TrainMode::MG, init_rng);
    params = model.stack->params;
  }
  if (mode == TrainMode::Dieting) params.emplace(kWMax, row_tensor(*bb.layers.front().storage));
  if (trains_backbone(mode)) {
    for (const auto& l : bb.layers) params.emplace(weight_name(l.name), row_tensor(l.weights()));
    for (const auto& [name, t] : bb.dense) params.emplace(name, t);
  } else if (mode != TrainMode::Dieting) {
    for (const auto& l : bb.layers) inputs.emplace(weight_name(l.name), row_tensor(l.weights()));
  }
  if (config.train_item_embedding && !trains_backbone(mode))
    params.emplace(kItemEmbedding, bb.dense.at(kItemEmbedding));
  if (mode == TrainMode::MaskOnly)
    for (const auto& l : bb.layers) params.emplace(score_name(l.name), num::init_xavier_normal({l.size(), 1}, init_rng).reshaped({1, l.size()}));
  if (mode == TrainMode::RandomPrune) {
    Diet d;
    d.keep_ratio = config.keep_ratio;
    for (const auto& l : bb.layers) {
      const std::size_t k = keep_count(l.size(), config.keep_ratio);
      std::vector<std::uint32_t> order(l.size());
      std::iota(order.begin(), order.end(), 0u);
      init_rng.shuffle(std::span(order));
      LayerMask m{l.name, l.rows, l.cols, k, std::vector<std::uint8_t>(l.size(), 0)};
      for (std::size_t i = 0; i < k; ++i) m.bits[order[i]] = 1;
      num::Tensor mt({1, l.size()});
      for (std::size_t i = 0; i < l.size(); ++i) mt[i] = m.bits[i];
      inputs.emplace(mask_name(l.name), std::move(mt));
      d.layers.push_back(std::move(m));
    }
    model.fixed_diet = std::move(d);
  }

  const std::size_t n = samples.size();
  const std::size_t B = std::min(config.batch_size, n);
  const std::size_t steps_per_epoch = (n + B - 1) / B;
  const std::size_t cycle = config.cycle_length ? config.cycle_length : std::max<std::size_t>(2, steps_per_epoch * config.epochs);

  std::map<std::size_t, TrainGraph> graphs;
  auto graph_for = [&](std::size_t batch) -> TrainGraph& {
    auto it = graphs.find(batch);
    if (it == graphs.end()) it = graphs.emplace(batch, build_train_graph(config, bb, model.stack ? &*model.stack : nullptr)).first;
    return it->second;
  };

  // Rebuilds model fields that mirror trained parameters.
  auto sync_model = [&]() {
    if (model.stack)
      for (auto& [name, t] : model.stack->params) t = params.at(name);
    if (mode == TrainMode::Dieting) {
      const auto& w = params.at(kWMax);
      std::copy(w.data().begin(), w.data().end(), model.backbone.layers.front().storage->begin());
    }
    if (config.train_item_embedding && !trains_backbone(mode))
      model.backbone.dense.at(kItemEmbedding) = params.at(kItemEmbedding);
    if (trains_backbone(mode)) {
      for (auto& l : model.backbone.layers) {
        const auto& w = params.at(weight_name(l.name));
        std::copy(w.data().begin(), w.data().end(), l.mutable_weights().begin());
      }
      for (auto& [name, t] : model.backbone.dense) t = params.at(name);
    }
    if (mode == TrainMode::MaskOnly) {
      model.scores.clear();
      for (const auto& l : model.backbone.layers) {
        const auto& s = params.at(score_name(l.name));
        model.scores.emplace_back(s.data().begin(), s.data().end());
      }
      model.fixed_diet = diet_from_scores(model.backbone, model.scores, config.keep_ratio);
    }
  };

  FitResult result;
  AdamState adam;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(std::span(order));
    double epoch_total = 0.0;
    for (std::size_t start = 0; start < n; start += B) {
      const std::size_t cur = std::min(B, n - start);
      std::vector<std::span<const ItemId>> ctx(cur);
      num::Tensor target({cur});
      std::vector<num::Tensor> negs(config.negatives_per_positive, num::Tensor({cur}));
      for (std::size_t b = 0; b < cur; ++b) {
        const Sample& s = samples[order[start + b]];
        ctx[b] = s.context;
        target[b] = s.target;
        for (auto& neg : negs) {
          auto x = static_cast<ItemId>(rng.below(bb.n_items - 1));
          if (x >= s.target) ++x;
          neg[b] = x;
        }
      }
      const auto batch = make_sequence_batch(std::span<const std::span<const ItemId>>(ctx), bb.hyper.max_len);
      TrainGraph& tg = graph_for(cur);

      num::Bindings bind;
      batch.bind(bind);
      bind.bind(kTargetInput, target);
      for (std::size_t j = 0; j < negs.size(); ++j) bind.bind(negative_input(j), negs[j]);
      if (!trains_backbone(mode)) bind_dense(bind, bb);
      for (const auto& [name, t] : inputs) bind.bind(name, t);
      for (const auto& [name, t] : params) bind.bind(name, t);

      const num::NodeId outs[] = {tg.loss};
      const auto exec = num::forward_eval(tg.g, bind, outs);
      const double loss = exec.value(tg.loss)[0] / static_cast<double>(cur);
      // Mean loss over the batch: scale the seed instead of the graph.
      const num::Seed seed{tg.loss, num::Tensor({1}, 1.0 / static_cast<double>(cur))};
      const auto grads = num::backward_pass(exec, std::span(&seed, 1), num::GradScope::ParamsOnly);
      const double lr = triangular_lr(step, config.lr_base, cycle);
      adam_step(params, grads.all(), adam, lr);
      result.log.push_back(LogRow{epoch, step, lr, loss});
      epoch_total += loss;
      ++step;
    }
    const double mean = epoch_total / static_cast<double>(steps_per_epoch);
    result.epoch_loss.push_back(mean);
    if (config.verify_frozen && !trains_backbone(mode) && mode != TrainMode::Dieting) {
      BackboneParams now = bb;
      if (config.train_item_embedding) now.dense.at(kItemEmbedding) = frozen_snapshot.dense.at(kItemEmbedding);
      if (!bitwise_equal(frozen_snapshot, now)) throw NumericError("frozen backbone changed during training");
    }
    sync_model();
    if (on_epoch) on_epoch(epoch, model, mean);
  }
  sync_model();
  result.model = std::move(model);
  return result;
}

std::string log_csv(std::span<const LogRow> rows) {
  std::ostringstream out;
  out.precision(17);
  out << "epoch,step,lr,loss\n";
  for (const auto& r : rows) out << r.epoch << ',' << r.step << ',' << r.lr << ',' << r.loss << '\n';
  return out.str();
}

// ------------------------------------------------------------ checkpoints

void save_model(const std::filesystem::path& path, const Model& model) {
  Checkpoint c;
  c.backbone = model.backbone;
  nlohmann::json cfg{{"mode", train_mode_name(model.mode)}, {"keep_ratio", model.keep_ratio}};
  if (model.stack) {
    c.generator = model.stack->params;
    cfg["row_correction"] = model.stack->row_correction;
  }
  for (std::size_t i = 0; i < model.scores.size(); ++i)
    c.score_maps.emplace(score_name(model.backbone.layers[i].name), row_tensor(model.scores[i]));
  if (model.fixed_diet)
    for (const auto& m : model.fixed_diet->layers) {
      num::Tensor t({1, m.bits.size()});
      for (std::size_t i = 0; i < m.bits.size(); ++i) t[i] = m.bits[i];
      c.other.emplace(mask_name(m.name), std::move(t));
    }
  c.config_json = cfg.dump();
  save_checkpoint(path, c);
}

Model load_model(const std::filesystem::path& path) {
  const Checkpoint c = load_checkpoint(path);
  if (!c.backbone) throw DataError("model checkpoint has no backbone section");
  nlohmann::json cfg;
  try {
    cfg = nlohmann::json::parse(c.config_json);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("model checkpoint config is not valid JSON: ") + e.what());
  }
  Model m;
  m.mode = parse_train_mode(cfg.at("mode").get<std::string>());
  m.keep_ratio = cfg.at("keep_ratio").get<double>();
  m.backbone = *c.backbone;
  if (uses_generator(m.mode)) {
    GeneratorStack s;
    s.keep_ratio = m.keep_ratio;
    s.row_correction = cfg.value("row_correction", true);
    s.d = m.backbone.hyper.d;
    s.max_len = m.backbone.hyper.max_len;
    for (const auto& l : m.backbone.layers) {
      s.layers.push_back(l.name);
      s.shapes.emplace_back(l.rows, l.cols);
    }
    s.params = c.generator;
    m.stack = std::move(s);
  }
  if (m.mode == TrainMode::MaskOnly) {
    for (const auto& l : m.backbone.layers) {
      const auto& t = c.score_maps.at(score_name(l.name));
      m.scores.emplace_back(t.data().begin(), t.data().end());
    }
    m.fixed_diet = diet_from_scores(m.backbone, m.scores, m.keep_ratio);
  }
  if (m.mode == TrainMode::RandomPrune) {
    Diet d;
    d.keep_ratio = m.keep_ratio;
    for (const auto& l : m.backbone.layers) {
      const auto& t = c.other.at(mask_name(l.name));
      LayerMask mask{l.name, l.rows, l.cols, keep_count(l.size(), m.keep_ratio), {}};
      for (double v : t.data()) mask.bits.push_back(v != 0.0);
      d.layers.push_back(std::move(mask));
    }
    validate_diet(m.backbone, d);
    m.fixed_diet = std::move(d);
  }
  return m;
}

}  // namespace diet
