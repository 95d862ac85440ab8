#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "diet/evalcli/experiment.hpp"

namespace diet {

/// Keep fractions of the sparsity sweep.
inline constexpr double kSweepKeepRatios[] = {0.05, 0.1, 0.2, 0.3, 0.4};

/// One labelled group of seed runs (a mode, a keep ratio, or both).
struct RunGroup {
  TrainMode mode = TrainMode::Diet;
  double keep_ratio = 0.1;
  std::vector<SeedRun> runs;
};

/// `mode,keep_ratio,seed,epoch,loss,ndcg,hit`, one row per epoch.
std::string curves_csv(std::span<const RunGroup> groups);
/// `mode,keep_ratio,seed,ndcg,hit`, one row per seed run.
std::string runs_csv(std::span<const RunGroup> groups);
/// `mode,keep_ratio,runs,mean_ndcg,se_ndcg,mean_hit,se_hit`.
std::string summary_csv(std::span<const RunGroup> groups);

/// Per-layer share of all-zero rows in the effective weights, averaged over
/// the diets the model produces for the given test histories.
std::vector<double> mean_zero_row_fractions(const Model& model, std::span<const TestCase> test);

struct ZeroRowSeries {
  TrainMode mode = TrainMode::Diet;
  std::uint64_t seed = 0;
  std::vector<double> zero_fraction;  // per layer
};

/// `mode,seed,layer,zero_row_pct,nonzero_row_pct`.
std::string zero_rows_csv(const BackboneParams& backbone, std::span<const ZeroRowSeries> series);

/// Writes `text` to `dir / name`, creating `dir`. Throws DataError on failure.
void write_text(const std::filesystem::path& dir, const std::string& name, const std::string& text);

/// Manifest listing the config and the files a command produced.
nlohmann::ordered_json manifest(const std::string& command, const ExperimentConfig& config,
                                const std::vector<std::string>& files);

}  // namespace diet
