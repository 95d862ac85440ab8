#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "diet/backbone/backbone.hpp"
#include "diet/data/data.hpp"
#include "diet/dietgen/dietgen.hpp"
#include "diet/numerics/graph.hpp"

namespace diet {

/// base:        trains the backbone itself, no masks
/// mask-only:   one learned global score map per layer (same diet for all)
/// mg:          per-user hypernet diets without row correction
/// diet:        per-user diets with row correction
/// dieting:     as diet, over a single shared buffer that is also trained
/// random-prune: a fixed random mask, surviving weights trained
enum class TrainMode { Base, MaskOnly, MG, Diet, Dieting, RandomPrune };

TrainMode parse_train_mode(std::string_view name);
std::string_view train_mode_name(TrainMode m);

struct TrainConfig {
  TrainMode mode = TrainMode::Diet;
  double keep_ratio = 0.1;
  std::size_t epochs = 10;
  std::size_t batch_size = 128;
  double lr_base = 0.001;
  /// Steps per triangular cycle; 0 means one cycle over the whole run.
  std::size_t cycle_length = 0;
  std::uint64_t seed = 0;
  std::size_t negatives_per_positive = 1;
  /// Non-base modes also train the candidate item embeddings, which the
  /// cloud ships with the scores anyway; every other backbone tensor stays
  /// frozen.
  bool train_item_embedding = true;
  /// Verify after every epoch that frozen backbone weights are untouched.
  bool verify_frozen = true;
};

void validate(const TrainConfig& c);

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t step = 0;
  std::map<std::string, num::Tensor> m;
  std::map<std::string, num::Tensor> v;
};

/// softplus(-s_target) + sum softplus(s_neg), i.e. binary cross-entropy with
/// the target as positive and the negatives as negatives.
double compute_loss(std::span<const double> scores, ItemId target, std::span<const ItemId> negatives);

double triangular_lr(std::size_t step, double lr_base, std::size_t cycle_length);

/// One bias-corrected Adam update of every parameter that has a gradient.
/// Throws NumericError on a non-finite gradient (before touching anything).
void adam_step(ParamSet& params, const std::map<std::string, num::Tensor>& grads, AdamState& state, double lr);

/// A trained recommender of any mode, self-contained for evaluation.
struct Model {
  TrainMode mode = TrainMode::Diet;
  double keep_ratio = 1.0;
  BackboneParams backbone;
  std::optional<GeneratorStack> stack;       // mg, diet, dieting
  std::vector<std::vector<double>> scores;   // mask-only
  std::optional<Diet> fixed_diet;            // random-prune

  /// The diet an edge with this history would receive.
  Diet diet_for(std::span<const ItemId> seq) const;
  std::vector<double> scores_for(std::span<const ItemId> seq) const;
};

struct LogRow {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
};

struct FitResult {
  Model model;
  std::vector<LogRow> log;
  std::vector<double> epoch_loss;  // mean batch loss per epoch
};

using EpochCallback = std::function<void(std::size_t epoch, const Model& model, double mean_loss)>;

/// `backbone` is the frozen initial network. Throws DataError on an empty
/// training split.
FitResult fit(const TrainConfig& config, const Split& train, const BackboneParams& backbone,
              const EpochCallback& on_epoch = nullptr);

/// `epoch,step,lr,loss` with a header row.
std::string log_csv(std::span<const LogRow> rows);

/// Model checkpoint in the backbone container (config in the 'C' section).
void save_model(const std::filesystem::path& path, const Model& model);
Model load_model(const std::filesystem::path& path);

}  // namespace diet
