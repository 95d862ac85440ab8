#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"

#include "diet/backbone/backbone.hpp"
#include "diet/data/data.hpp"
#include "diet/evalcli/metrics.hpp"
#include "diet/trainer/trainer.hpp"

namespace diet {

/// Everything one experiment needs. Read from and written to a flat JSON
/// object; unknown keys are rejected.
struct ExperimentConfig {
  /// A log file path, or "synthetic-markov" for the generated walk data.
  std::string data = "synthetic-markov";
  LogFormat format = LogFormat::Tab;
  std::size_t synthetic_users = 200;
  std::size_t synthetic_items = 100;
  std::size_t synthetic_length = 20;
  double synthetic_noise = 0.1;
  std::uint64_t synthetic_seed = 0;

  SplitSpec split;
  Arch arch = Arch::SASRec;
  BackboneHyper hyper;
  TrainConfig train;  // train.seed is replaced per run
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};

  std::size_t top_n = 10;
  bool exclude_history = true;
  /// Evaluate on the test split after every epoch (training curves).
  bool eval_every_epoch = false;

  std::filesystem::path output_dir = "out";
  std::filesystem::path cache_dir;  // empty: no split cache
};

void validate(const ExperimentConfig& c);
nlohmann::ordered_json to_json(const ExperimentConfig& c);
/// Starts from the defaults and applies every key of `j`. Throws
/// ConfigError on an unknown key or a value of the wrong type.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

/// Applies "key=value" overrides; the value is parsed as JSON when it can be
/// and taken as a string otherwise.
void apply_overrides(ExperimentConfig& c, const std::vector<std::string>& assignments);

/// Loads or generates the interaction log and splits it.
Split load_experiment_split(const ExperimentConfig& c);

/// Backbone for one seed: deterministic in (arch, hyper, n_items, seed).
BackboneParams experiment_backbone(const ExperimentConfig& c, std::size_t n_items, std::uint64_t seed);

struct EpochPoint {
  std::size_t epoch = 0;
  double loss = 0.0;
  double ndcg = 0.0;  // NaN when not evaluated
  double hit = 0.0;
};

struct SeedRun {
  std::uint64_t seed = 0;
  std::vector<EpochPoint> curve;
  std::vector<LogRow> log;
  EvalResult final;
  Model model;
};

struct Summary {
  std::size_t runs = 0;
  double mean_ndcg = 0.0;
  double se_ndcg = 0.0;  // standard error of the mean; 0 for one run
  double mean_hit = 0.0;
  double se_hit = 0.0;
};

Summary summarize(const std::vector<SeedRun>& runs);

Scorer model_scorer(const Model& m);

/// Called after each finished seed, e.g. to persist its checkpoint.
using RunCallback = std::function<void(const SeedRun&)>;

/// Trains one model per configured seed and evaluates each on the test split.
std::vector<SeedRun> run_experiment(const ExperimentConfig& c, const Split& split, const RunCallback& on_run = nullptr);

}  // namespace diet
