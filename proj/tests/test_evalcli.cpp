#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "diet/error.hpp"
#include "diet/evalcli/experiment.hpp"
#include "diet/evalcli/metrics.hpp"
#include "diet/evalcli/report.hpp"
#include "diet/numerics/rng.hpp"
#include "doctest.h"

using namespace diet;

namespace {

// Independent metric: the target's rank is one plus the number of eligible
// items that beat it (higher score, or equal score and lower id).
std::pair<double, double> brute_force(const std::vector<double>& scores, ItemId target,
                                      const std::vector<ItemId>& excluded, std::size_t n) {
  std::size_t rank = 1;
  const double st = scores[static_cast<std::size_t>(target)];
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const auto id = static_cast<ItemId>(i);
    if (id == target || std::count(excluded.begin(), excluded.end(), id)) continue;
    if (scores[i] > st || (scores[i] == st && id < target)) ++rank;
  }
  if (rank > n) return {0.0, 0.0};
  return {1.0 / std::log2(static_cast<double>(rank) + 1.0), 1.0};
}

ExperimentConfig tiny_config() {
  ExperimentConfig c;
  c.synthetic_users = 30;
  c.synthetic_items = 20;
  c.synthetic_length = 10;
  c.split.k_core = 1;
  c.hyper.d = 8;
  c.hyper.heads = 2;
  c.train.epochs = 2;
  c.train.batch_size = 64;
  c.train.lr_base = 0.01;
  c.seeds = {0, 1};
  c.eval_every_epoch = true;
  return c;
}

}  // namespace

TEST_CASE("ndcg and hit: closed forms") {
  const std::vector<ItemId> ranked{7, 3, 9, 1};
  CHECK(ndcg_at_n(ranked, 7, 10) == 1.0);
  CHECK(ndcg_at_n(ranked, 9, 10) == 0.5);
  CHECK(ndcg_at_n(ranked, 5, 10) == 0.0);
  CHECK(hit_at_n(ranked, 1, 10) == 1.0);
  CHECK(hit_at_n(ranked, 5, 10) == 0.0);
  CHECK(hit_at_n(ranked, 1, 3) == 0.0);
  CHECK(ndcg_at_n(ranked, 1, 3) == 0.0);
  CHECK_THROWS_AS(ndcg_at_n(ranked, 7, 0), ConfigError);
  CHECK_THROWS_AS(hit_at_n(ranked, 7, 0), ConfigError);
}

TEST_CASE("top_n: order, ties, exclusion and NaN") {
  const std::vector<double> s{0.5, 2.0, 0.5, -1.0, 2.0};
  CHECK(top_n(s, 3) == std::vector<ItemId>{1, 4, 0});
  const ItemId ex[] = {1, 0};
  CHECK(top_n(s, 3, ex) == std::vector<ItemId>{4, 2, 3});
  CHECK(top_n(s, 10).size() == 5);
  const std::vector<double> bad{0.0, std::nan("")};
  CHECK_THROWS_AS(top_n(bad, 1), NumericError);
}

TEST_CASE("metrics agree exactly with a brute-force implementation") {
  num::Rng rng(42);
  for (int c = 0; c < 100; ++c) {
    const std::size_t items = 5 + rng.below(60);
    std::vector<double> scores(items);
    // Coarse values force plenty of ties.
    for (double& v : scores) v = std::floor(rng.uniform() * 8.0);
    const auto target = static_cast<ItemId>(rng.below(items));
    std::vector<ItemId> excluded;
    for (std::size_t i = 0; i < items; ++i)
      if (static_cast<ItemId>(i) != target && rng.uniform() < 0.2) excluded.push_back(static_cast<ItemId>(i));
    const std::size_t n = 1 + rng.below(12);
    const auto ranked = top_n(scores, n, excluded);
    const auto [ndcg, hit] = brute_force(scores, target, excluded, n);
    CHECK(ndcg_at_n(ranked, target, n) == ndcg);
    CHECK(hit_at_n(ranked, target, n) == hit);
    CHECK(hit == static_cast<double>(ndcg > 0.0));
  }
}

TEST_CASE("ndcg is monotone in rank and hit is non-decreasing in N") {
  std::vector<ItemId> ranked(20);
  for (std::size_t i = 0; i < ranked.size(); ++i) ranked[i] = static_cast<ItemId>(i);
  double prev = 2.0;
  for (ItemId t = 0; t < 20; ++t) {
    const double v = ndcg_at_n(ranked, t, 20);
    CHECK(v <= prev);
    CHECK(v > 0.0);
    prev = v;
  }
  for (ItemId t = 0; t < 20; ++t) {
    double last = 0.0;
    for (std::size_t n = 1; n <= 25; ++n) {
      const double h = hit_at_n(ranked, t, n);
      CHECK(h >= last);
      last = h;
    }
  }
}

TEST_CASE("evaluate: perfect ranker, random scorer binomial band, order invariance, errors") {
  std::vector<TestCase> test;
  num::Rng rng(9);
  for (int u = 0; u < 1000; ++u)
    test.push_back(TestCase{u, {static_cast<ItemId>(rng.below(100))}, static_cast<ItemId>(rng.below(100))});

  std::size_t at = 0;
  const auto perfect = evaluate(
      [&](std::span<const ItemId>) {
        std::vector<double> s(100, 0.0);
        s[static_cast<std::size_t>(test[at++].target)] = 1.0;
        return s;
      },
      test, 10, false);
  CHECK(perfect.ndcg == 1.0);
  CHECK(perfect.hit == 1.0);

  num::Rng noise(3);
  const auto random = evaluate(
      [&](std::span<const ItemId>) {
        std::vector<double> s(100);
        for (double& v : s) v = noise.uniform();
        return s;
      },
      test, 10, false);
  const double sigma = std::sqrt(0.1 * 0.9 / 1000.0);
  CHECK(std::abs(random.hit - 0.1) <= 3.0 * sigma);

  // A context-keyed scorer: same per-user values in any order.
  const auto keyed = [](std::span<const ItemId> ctx) {
    num::Rng r(static_cast<std::uint64_t>(ctx.front()) + 1);
    std::vector<double> s(100);
    for (double& v : s) v = r.uniform();
    return s;
  };
  auto shuffled = test;
  std::reverse(shuffled.begin(), shuffled.end());
  const auto a = evaluate(keyed, test);
  const auto b = evaluate(keyed, shuffled);
  CHECK(a.ndcg == doctest::Approx(b.ndcg).epsilon(1e-12));
  CHECK(a.hit == b.hit);
  CHECK(a.exclude_history);

  CHECK_THROWS_AS(evaluate(keyed, {}), DataError);
  std::vector<TestCase> no_ctx{TestCase{0, {}, 1}};
  CHECK_THROWS_AS(evaluate(keyed, no_ctx), DataError);
}

TEST_CASE("evaluate: history exclusion keeps the target a candidate") {
  // Items 0..2 outrank the target 5; 0 and 1 are history.
  const auto scorer = [](std::span<const ItemId>) { return std::vector<double>{9, 8, 7, 1, 1, 6, 0}; };
  const std::vector<TestCase> test{TestCase{0, {0, 1, 5}, 5}};
  CHECK(evaluate(scorer, test, 1, true).hit == 0.0);
  CHECK(evaluate(scorer, test, 2, true).ndcg == doctest::Approx(1.0 / std::log2(3.0)));
  CHECK(evaluate(scorer, test, 3, false).hit == 0.0);
}

TEST_CASE("experiment config: JSON round trip, unknown keys, overrides") {
  auto c = tiny_config();
  c.train.mode = TrainMode::MG;
  c.arch = Arch::Caser;
  const auto j = to_json(c);
  const auto back = experiment_config_from_json(nlohmann::json::parse(j.dump()));
  CHECK(to_json(back).dump() == j.dump());

  CHECK_THROWS_AS(experiment_config_from_json(nlohmann::json{{"epohcs", 3}}), ConfigError);
  CHECK_THROWS_AS(experiment_config_from_json(nlohmann::json{{"epochs", "three"}}), ConfigError);
  CHECK_THROWS_AS(experiment_config_from_json(nlohmann::json{{"epochs", -1}}), ConfigError);
  CHECK_THROWS_AS(experiment_config_from_json(nlohmann::json{{"seeds", nlohmann::json::array()}}), ConfigError);
  CHECK_THROWS_AS(experiment_config_from_json(nlohmann::json{{"mode", "adamw"}}), ConfigError);
  CHECK_THROWS_AS(experiment_config_from_json(nlohmann::json::array()), ConfigError);

  apply_overrides(c, {"keep_ratio=0.3", "mode=diet", "seeds=[4]", "data=somewhere.tsv"});
  CHECK(c.train.keep_ratio == 0.3);
  CHECK(c.train.mode == TrainMode::Diet);
  CHECK(c.seeds == std::vector<std::uint64_t>{4});
  CHECK(c.data == "somewhere.tsv");
  CHECK_THROWS_AS(apply_overrides(c, {"keep_ratio"}), ConfigError);
  CHECK_THROWS_AS(apply_overrides(c, {"keep_ratio=2"}), ConfigError);

  const auto path = std::filesystem::temp_directory_path() / "diet-test-config.json";
  std::ofstream(path) << R"({"mode": "base", "epochs": 3})";
  const auto loaded = load_experiment_config(path);
  CHECK(loaded.train.mode == TrainMode::Base);
  CHECK(loaded.train.epochs == 3);
  std::ofstream(path) << "{not json";
  CHECK_THROWS_AS(load_experiment_config(path), ConfigError);
  std::filesystem::remove(path);

  ExperimentConfig missing;
  missing.data = "/nonexistent/ratings.dat";
  CHECK_THROWS_AS(load_experiment_split(missing), DataError);
}

TEST_CASE("summarize: mean and standard error") {
  std::vector<SeedRun> runs(3);
  runs[0].final.ndcg = 0.1;
  runs[1].final.ndcg = 0.2;
  runs[2].final.ndcg = 0.3;
  for (auto& r : runs) r.final.hit = 0.5;
  const auto s = summarize(runs);
  CHECK(s.runs == 3);
  CHECK(s.mean_ndcg == doctest::Approx(0.2));
  CHECK(s.se_ndcg == doctest::Approx(0.1 / std::sqrt(3.0)));
  CHECK(s.mean_hit == 0.5);
  CHECK(s.se_hit == 0.0);
  CHECK(summarize(std::vector<SeedRun>(1)).se_ndcg == 0.0);
}

TEST_CASE("run_experiment: one run per seed, deterministic reports") {
  const auto c = tiny_config();
  const auto split = load_experiment_split(c);
  std::size_t callbacks = 0;
  const auto runs = run_experiment(c, split, [&](const SeedRun&) { ++callbacks; });
  REQUIRE(runs.size() == 2);
  CHECK(callbacks == 2);
  for (const auto& r : runs) {
    CHECK(r.curve.size() == c.train.epochs);
    CHECK(std::isfinite(r.final.ndcg));
    CHECK(r.curve.back().ndcg == r.final.ndcg);
  }
  const std::vector<RunGroup> groups{RunGroup{c.train.mode, c.train.keep_ratio, runs}};
  const auto again = run_experiment(c, split);
  const std::vector<RunGroup> groups2{RunGroup{c.train.mode, c.train.keep_ratio, again}};
  CHECK(curves_csv(groups) == curves_csv(groups2));
  CHECK(runs_csv(groups) == runs_csv(groups2));
  CHECK(summary_csv(groups) == summary_csv(groups2));
  CHECK(curves_csv(groups).rfind("mode,keep_ratio,seed,epoch,loss,ndcg,hit\n", 0) == 0);
  // Header plus one row per (seed, epoch).
  const auto curves = curves_csv(groups);
  CHECK(std::count(curves.begin(), curves.end(), '\n') == 1 + 2 * 2);
  const auto per_seed = runs_csv(groups);
  CHECK(std::count(per_seed.begin(), per_seed.end(), '\n') == 3);
}

TEST_CASE("zero-row fractions: dense model has none, csv layout") {
  const auto c = tiny_config();
  const auto split = load_experiment_split(c);
  Model m;
  m.mode = TrainMode::Base;
  m.backbone = experiment_backbone(c, split.n_items, 0);
  const auto f = mean_zero_row_fractions(m, split.test);
  CHECK(f.size() == m.backbone.layers.size());
  for (double v : f) CHECK(v == 0.0);
  const std::vector<ZeroRowSeries> series{{TrainMode::Base, 0, f}};
  const auto csv = zero_rows_csv(m.backbone, series);
  CHECK(csv.rfind("mode,seed,layer,zero_row_pct,nonzero_row_pct\n", 0) == 0);
  CHECK(csv.find(",0,100\n") != std::string::npos);
  CHECK_THROWS_AS(mean_zero_row_fractions(m, {}), DataError);
}
