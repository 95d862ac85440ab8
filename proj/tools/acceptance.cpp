// Acceptance suite: one PASS/FAIL line per criterion. Tolerances, seeds and
// epoch budgets are fixed here so every run checks the same thing.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "diet/backbone/backbone.hpp"
#include "diet/dietgen/dietgen.hpp"
#include "diet/error.hpp"
#include "diet/evalcli/cli.hpp"
#include "diet/evalcli/experiment.hpp"
#include "diet/evalcli/metrics.hpp"
#include "diet/evalcli/report.hpp"
#include "diet/numerics/rng.hpp"
#include "diet/protocol/protocol.hpp"
#include "primitive_cases.hpp"

using namespace diet;
namespace fs = std::filesystem;

namespace {

// ------------------------------------------------------------ pinned values

constexpr double kRatioLow = 31.5;
constexpr double kRatioHigh = 32.0;
constexpr double kGradRelTol = 1e-6;
constexpr double kFdStep = 1e-5;
constexpr double kDietingRelTol = 0.10;
constexpr int kSteCases = 100;
constexpr int kBinarizerCases = 1000;
constexpr int kMetricCases = 100;
constexpr int kWireRoundTrips = 1000;
constexpr int kWireMutations = 100;

// ML-100K runs: the SASRec setup with lr 0.001 and batch 128.
constexpr std::size_t kMl100kEpochs = 8;
constexpr std::size_t kMl100kBatch = 128;
constexpr double kMl100kLr = 0.001;
constexpr double kMl100kKeep = 0.1;
const std::vector<std::uint64_t> kSeeds{0, 1, 2, 3, 4};
constexpr double kRunBudgetSeconds = 20.0 * 60.0;

// Synthetic Markov setup of the DIETING comparison.
constexpr std::size_t kDietingEpochs = 10;
const std::vector<std::uint64_t> kDietingSeeds{0, 1, 2};

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// ------------------------------------------------------------- criterion 1

Outcome transmission_ratio(const fs::path& ml100k) {
  std::size_t n_items = 602;
  if (fs::exists(ml100k)) n_items = load_split(ml100k, LogFormat::Tab, SplitSpec{}).n_items;
  num::Rng rng(0);
  const auto bb = build_backbone(Arch::SASRec, n_items, {}, rng);
  const std::uint64_t n = bb.maskable_count();
  const auto dense = transmission_bits(TransmitMethod::Dense, n, 1.0);
  const double analytic =
      static_cast<double>(dense) / static_cast<double>(transmission_bits(TransmitMethod::Binary, n, 1.0));

  const auto stack = build_generator_stack(bb, kMl100kKeep, true, rng);
  const Sequence history{1, 2, 3, 4, 5};
  const auto bytes = encode_diet(generate_diet(stack, history, bb));
  const double actual = static_cast<double>(dense) / (8.0 * static_cast<double>(bytes.size()));
  const bool ok = analytic >= kRatioLow && analytic <= kRatioHigh && actual >= kRatioLow && actual <= kRatioHigh;
  return {ok, fmt("N=%llu maskable weights; analytic 32N/N = %.4f; encoded diet %zu bytes (header %zu) gives %.4f; "
                  "band [%.1f, %.1f]",
                  static_cast<unsigned long long>(n), analytic, bytes.size(), wire_header_bytes(bb.layers.size()),
                  actual, kRatioLow, kRatioHigh)};
}

// ---------------------------------------------------------- criteria 2 and 3

struct ModeRuns {
  TrainMode mode;
  std::vector<SeedRun> runs;
  double worst_seconds = 0.0;
};

ExperimentConfig ml100k_config(const fs::path& ml100k, const fs::path& out, TrainMode mode) {
  ExperimentConfig c;
  c.data = ml100k.string();
  c.format = LogFormat::Tab;
  c.arch = Arch::SASRec;
  c.train.mode = mode;
  c.train.epochs = kMl100kEpochs;
  c.train.batch_size = kMl100kBatch;
  c.train.lr_base = kMl100kLr;
  c.train.keep_ratio = kMl100kKeep;
  c.seeds = kSeeds;
  c.cache_dir = out / "cache";
  c.output_dir = out;
  return c;
}

ModeRuns train_mode(const fs::path& ml100k, const fs::path& out, TrainMode mode, const Split& split) {
  ModeRuns r{mode, {}, 0.0};
  auto c = ml100k_config(ml100k, out, mode);
  for (std::uint64_t seed : kSeeds) {
    c.seeds = {seed};
    const auto t0 = std::chrono::steady_clock::now();
    auto runs = run_experiment(c, split);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    r.worst_seconds = std::max(r.worst_seconds, secs);
    spdlog::info("{} seed {}: NDCG@10 {:.4f} Hit@10 {:.4f} ({:.0f} s)", train_mode_name(mode), seed,
                 runs.front().final.ndcg, runs.front().final.hit, secs);
    r.runs.push_back(std::move(runs.front()));
  }
  return r;
}

std::string per_seed(const ModeRuns& m) {
  std::string s;
  for (const auto& r : m.runs) s += fmt("%s%.4f", s.empty() ? "" : " ", r.final.ndcg);
  return s;
}

Outcome base_vs_diet(const ModeRuns& base, const ModeRuns& diet) {
  const auto b = summarize(base.runs), d = summarize(diet.runs);
  const double worst = std::max(base.worst_seconds, diet.worst_seconds);
  const bool ok = d.mean_ndcg >= b.mean_ndcg && d.mean_hit >= b.mean_hit && worst <= kRunBudgetSeconds;
  return {ok, fmt("%zu epochs, 5 seeds: NDCG@10 DIET %.4f±%.4f vs Base %.4f±%.4f; Hit@10 DIET %.4f±%.4f vs Base "
                  "%.4f±%.4f; slowest run %.0f s (budget %.0f s)",
                  kMl100kEpochs, d.mean_ndcg, d.se_ndcg, b.mean_ndcg, b.se_ndcg, d.mean_hit, d.se_hit, b.mean_hit,
                  b.se_hit, worst, kRunBudgetSeconds)};
}

Outcome ablation(const ModeRuns& mask, const ModeRuns& mg, const ModeRuns& diet) {
  const auto a = summarize(mask.runs), g = summarize(mg.runs), d = summarize(diet.runs);
  // A tie is a deficit within one standard error of the difference.
  auto at_least = [](const Summary& hi, const Summary& lo) {
    return hi.mean_ndcg >= lo.mean_ndcg - std::hypot(hi.se_ndcg, lo.se_ndcg);
  };
  const bool ok = at_least(d, g) && at_least(g, a);
  std::size_t disagree = 0;
  for (std::size_t i = 0; i < kSeeds.size(); ++i)
    disagree += !(diet.runs[i].final.ndcg >= mg.runs[i].final.ndcg && mg.runs[i].final.ndcg >= mask.runs[i].final.ndcg);
  return {ok, fmt("NDCG@10 DIET %.4f±%.4f, +MG %.4f±%.4f, +mask %.4f±%.4f; per seed DIET [%s] +MG [%s] +mask [%s]; "
                  "%zu of 5 seeds break the strict order",
                  d.mean_ndcg, d.se_ndcg, g.mean_ndcg, g.se_ndcg, a.mean_ndcg, a.se_ndcg, per_seed(diet).c_str(),
                  per_seed(mg).c_str(), per_seed(mask).c_str(), disagree)};
}

// ------------------------------------------------------------- criterion 4

Outcome ste_contract() {
  num::Rng rng(4);
  std::size_t mismatches = 0, entries = 0;
  for (int c = 0; c < kSteCases; ++c) {
    const std::size_t rows = 1 + rng.below(8), cols = 1 + rng.below(16), n = rows * cols, batch = 1 + rng.below(4);
    const double keep = 0.05 + 0.9 * rng.uniform();
    num::Graph g;
    const auto s = g.input("s");
    const auto w = g.input("w");
    const auto eff = g.mul(g.custom(s, topk_ste(keep)), w);
    num::Tensor sv({batch, n}), wv({1, n}), up({batch, n});
    for (double& v : sv.data()) v = rng.normal();
    for (double& v : wv.data()) v = rng.normal();
    for (double& v : up.data()) v = rng.normal();
    num::Bindings b;
    b.bind("s", sv).bind("w", wv);
    const num::Seed seed{eff, up};
    const auto grads = num::backward_pass(num::forward_eval(g, b), std::span(&seed, 1));
    const auto& gs = grads["s"];
    for (std::size_t r = 0; r < batch; ++r) {
      const auto ref = ste_backward(up.data().subspan(r * n, n), wv.data());
      for (std::size_t j = 0; j < n; ++j) {
        mismatches += gs[r * n + j] != up[r * n + j] * wv[j] || ref[j] != gs[r * n + j];
        ++entries;
      }
    }
  }
  return {mismatches == 0,
          fmt("%d random layers, %zu score entries; %zu differ from upstream*w (exact comparison)", kSteCases, entries,
              mismatches)};
}

// ------------------------------------------------------------- criterion 5

Outcome binarizer_oracle() {
  num::Rng rng(5);
  std::size_t wrong_bits = 0, wrong_count = 0, tie_arrays = 0;
  for (int c = 0; c < kBinarizerCases; ++c) {
    const std::size_t n = 1 + rng.below(300);
    const double keep = 0.01 + 0.99 * rng.uniform();
    std::vector<double> s(n);
    const bool coarse = c % 2 == 0;
    for (double& v : s) v = coarse ? std::round(rng.normal() * 2.0) : rng.normal();
    // Independent oracle: stable sort by descending magnitude, take the first k.
    const std::size_t k = keep_count(n, keep);
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return std::abs(s[a]) > std::abs(s[b]); });
    std::vector<std::uint8_t> want(n, 0);
    for (std::size_t i = 0; i < k; ++i) want[idx[i]] = 1;
    if (k < n && std::abs(s[idx[k - 1]]) == std::abs(s[idx[k]])) ++tie_arrays;
    const auto got = binarize_topk(s, keep);
    wrong_bits += got != want;
    wrong_count += static_cast<std::size_t>(std::count(got.begin(), got.end(), 1)) != k;
  }
  return {wrong_bits == 0 && wrong_count == 0,
          fmt("%d arrays (%zu with ties at the threshold): %zu mask mismatches, %zu popcount errors", kBinarizerCases,
              tie_arrays, wrong_bits, wrong_count)};
}

// ------------------------------------------------------------- criterion 6

Outcome gradient_checks() {
  num::Rng rng(2024);
  auto cases = testing::primitive_cases(rng);
  double worst = 0.0;
  std::string worst_name, failed;
  std::size_t checked = 0;
  for (auto& c : cases) {
    const auto r = testing::grad_check(c.graph, c.loss, c.values, c.leaves, kFdStep);
    checked += r.checked;
    if (r.worst_relative > worst) {
      worst = r.worst_relative;
      worst_name = c.name;
    }
    if (r.worst_relative >= kGradRelTol || r.checked == 0) failed += " " + c.name;
  }
  return {failed.empty(), fmt("%zu primitives, %zu gradient entries; worst relative error %.2e (%s); tolerance %.0e%s",
                              cases.size(), checked, worst, worst_name.c_str(), kGradRelTol,
                              failed.empty() ? "" : ("; failing:" + failed).c_str())};
}

// ------------------------------------------------------------- criterion 7

ExperimentConfig markov_config(TrainMode mode) {
  ExperimentConfig c;
  c.data = "synthetic-markov";
  c.synthetic_users = 200;
  c.synthetic_items = 50;
  c.synthetic_length = 20;
  c.synthetic_noise = 0.1;
  c.hyper.d = 16;
  c.hyper.heads = 2;
  c.train.mode = mode;
  c.train.epochs = kDietingEpochs;
  c.train.lr_base = 0.01;
  c.train.batch_size = 64;
  c.seeds = kDietingSeeds;
  return c;
}

Outcome dieting() {
  const auto split = load_experiment_split(markov_config(TrainMode::Diet));
  const auto diet_runs = run_experiment(markov_config(TrainMode::Diet), split);
  const auto dieting_runs = run_experiment(markov_config(TrainMode::Dieting), split);
  std::size_t aliased = 0, layers = 0;
  for (const auto& r : dieting_runs) {
    const auto& bb = r.model.backbone;
    const auto& buffer = *bb.layers.front().storage;
    for (const auto& l : bb.layers) {
      ++layers;
      const auto w = l.weights();
      aliased += bb.shared_buffer && l.storage.get() == &buffer && w.size() <= buffer.size() &&
                 std::equal(w.begin(), w.end(), buffer.begin());
    }
  }
  const double d = summarize(diet_runs).mean_ndcg, g = summarize(dieting_runs).mean_ndcg;
  const double rel = std::abs(g - d) / d;
  return {aliased == layers && rel <= kDietingRelTol,
          fmt("%zu/%zu layer views equal their W_max prefix after %zu epochs; Markov NDCG@10 DIETING %.4f vs DIET %.4f "
              "(%.1f%% apart, limit %.0f%%)",
              aliased, layers, kDietingEpochs, g, d, 100.0 * rel, 100.0 * kDietingRelTol)};
}

// ------------------------------------------------------------- criterion 8

// MACs per forward pass from the layer shapes alone.
std::uint64_t closed_form_flops(const BackboneParams& bb, std::size_t seq_len) {
  std::uint64_t total = 0;
  const std::size_t d = bb.hyper.d, L = bb.hyper.max_len;
  for (const auto& l : bb.layers) {
    const std::uint64_t per = l.rows * l.cols;
    if (bb.arch == Arch::SASRec) {
      total += per * std::min(seq_len, L);
    } else if (l.kind == LayerKind::ConvHorizontal) {
      total += per * (L - l.cols / d + 1);
    } else if (l.kind == LayerKind::ConvVertical) {
      total += per * d;
    } else {
      total += per;
    }
  }
  return total;
}

Outcome flops_accounting() {
  num::Rng rng(8);
  std::size_t checks = 0, bad = 0;
  for (Arch arch : {Arch::SASRec, Arch::Caser}) {
    const auto bb = build_backbone(arch, 50, {}, rng);
    const MaskedBackbone dense(bb, full_diet(bb));
    for (std::size_t len = 1; len <= bb.hyper.max_len; ++len) {
      ++checks;
      bad += count_flops(dense, len) != closed_form_flops(bb, len) || dense_flops(bb, len) != closed_form_flops(bb, len);
      for (std::size_t i = 0; i < bb.layers.size(); ++i) {
        const auto& l = bb.layers[i];
        const std::size_t z = 1 + rng.below(l.rows);
        Diet diet = full_diet(bb);
        auto& m = diet.layers[i];
        std::vector<std::size_t> rows(l.rows);
        std::iota(rows.begin(), rows.end(), 0);
        rng.shuffle(std::span(rows));
        for (std::size_t r = 0; r < z; ++r) std::fill_n(m.bits.begin() + static_cast<std::ptrdiff_t>(rows[r] * l.cols), l.cols, 0);
        m.keep_count = m.popcount();
        const std::uint64_t applications = [&] {
          if (arch == Arch::SASRec) return std::min(len, bb.hyper.max_len);
          if (l.kind == LayerKind::ConvHorizontal) return bb.hyper.max_len - l.cols / bb.hyper.d + 1;
          if (l.kind == LayerKind::ConvVertical) return bb.hyper.d;
          return std::size_t{1};
        }();
        ++checks;
        bad += count_flops(dense, len) - count_flops(MaskedBackbone(bb, diet), len) != z * l.cols * applications;
      }
    }
  }
  return {bad == 0, fmt("SASRec and Caser, all lengths and layers: %zu exact comparisons, %zu mismatches", checks, bad)};
}

// ------------------------------------------------------------- criterion 9

Outcome metrics_oracle() {
  num::Rng rng(9);
  std::size_t bad = 0;
  for (int c = 0; c < kMetricCases; ++c) {
    const std::size_t items = 5 + rng.below(80), n = 1 + rng.below(15);
    std::vector<double> scores(items);
    for (double& v : scores) v = std::floor(rng.uniform() * 10.0);
    const auto target = static_cast<ItemId>(rng.below(items));
    const auto ranked = top_n(scores, n);
    // Brute force: count items ranked ahead of the target.
    std::size_t rank = 1;
    for (std::size_t i = 0; i < items; ++i)
      rank += static_cast<ItemId>(i) != target &&
              (scores[i] > scores[static_cast<std::size_t>(target)] ||
               (scores[i] == scores[static_cast<std::size_t>(target)] && static_cast<ItemId>(i) < target));
    const double ndcg = rank <= n ? 1.0 / std::log2(static_cast<double>(rank) + 1.0) : 0.0;
    const double hit = rank <= n ? 1.0 : 0.0;
    bad += ndcg_at_n(ranked, target, n) != ndcg || hit_at_n(ranked, target, n) != hit;
  }
  const std::vector<ItemId> three{4, 8, 15, 16};
  const double r3 = ndcg_at_n(three, 15, 10);
  return {bad == 0 && r3 == 0.5,
          fmt("%d random cases: %zu disagree with the brute-force metric; NDCG(rank 3, N=10) = %.17g", kMetricCases, bad,
              r3)};
}

// ------------------------------------------------------------ criterion 10

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

Outcome determinism(const fs::path& out) {
  std::vector<std::string> files;
  auto run = [&](const fs::path& dir) {
    fs::remove_all(dir);
    const std::vector<std::string> common{"--set", "output_dir=" + dir.string(), "--set", "synthetic_users=60",
                                          "--set", "synthetic_items=30",         "--set", "d=16",
                                          "--set", "heads=2",                    "--set", "epochs=3",
                                          "--set", "seeds=[0,1]",                "--set", "lr=0.01"};
    std::ostringstream sink;
    auto with = [&](std::vector<std::string> head) {
      head.insert(head.end(), common.begin(), common.end());
      return run_cli(head, sink, sink);
    };
    return with({"train"}) == 0 && with({"report", "--sweep", "keep_ratio"}) == 0;
  };
  const auto a = out / "determinism-a", b = out / "determinism-b";
  if (!run(a) || !run(b)) return {false, "a pipeline run failed"};
  std::size_t compared = 0, differing = 0;
  for (const auto& e : fs::directory_iterator(a)) {
    if (e.path().extension() != ".csv") continue;
    ++compared;
    differing += slurp(e.path()) != slurp(b / e.path().filename());
  }
  return {compared > 0 && differing == 0,
          fmt("train + keep-ratio sweep twice with one config: %zu CSV reports compared byte for byte, %zu differ",
              compared, differing)};
}

// ------------------------------------------------------------ criterion 11

Outcome wire_fuzz() {
  num::Rng rng(11);
  const auto bb = build_backbone(Arch::SASRec, 40, {}, rng);
  std::size_t lossy = 0, accepted = 0;
  std::set<std::string> faults;
  for (int c = 0; c < kWireRoundTrips; ++c) {
    const double keep = 0.01 + 0.98 * rng.uniform();
    std::vector<std::vector<double>> scores;
    for (const auto& l : bb.layers) {
      std::vector<double> s(l.size());
      for (double& v : s) v = rng.normal();
      scores.push_back(std::move(s));
    }
    const Diet d = diet_from_scores(bb, scores, keep);
    lossy += !(decode_diet(encode_diet(d), bb, keep) == d);
  }
  std::vector<std::vector<double>> scores;
  for (const auto& l : bb.layers) {
    std::vector<double> s(l.size());
    for (double& v : s) v = rng.normal();
    scores.push_back(std::move(s));
  }
  const auto good = encode_diet(diet_from_scores(bb, scores, 0.1));
  for (int c = 0; c < kWireMutations; ++c) {
    auto bytes = good;
    const std::size_t header = wire_header_bytes(bb.layers.size());
    switch (c % 4) {
      case 0: bytes.resize(rng.below(bytes.size())); break;
      case 1: bytes.push_back(static_cast<std::uint8_t>(rng.below(256))); break;
      case 2: {
        const std::size_t bit = rng.below(header * 8);
        bytes[bit / 8] ^= static_cast<std::uint8_t>(1u << (bit % 8));
        break;
      }
      default: {
        // A payload flip changes that layer's popcount.
        const std::size_t bit = header * 8 + rng.below((bytes.size() - header) * 8);
        bytes[bit / 8] ^= static_cast<std::uint8_t>(1u << (bit % 8));
      }
    }
    try {
      decode_diet(bytes, bb, 0.1);
      ++accepted;
    } catch (const WireError& e) {
      faults.insert(std::string(wire_fault_name(e.fault())));
    }
  }
  std::string kinds;
  for (const auto& f : faults) kinds += (kinds.empty() ? "" : ",") + f;
  return {lossy == 0 && accepted == 0,
          fmt("%d round trips, %zu lossy; %d mutated payloads, %zu accepted; faults seen: %s", kWireRoundTrips, lossy,
              kWireMutations, accepted, kinds.c_str())};
}

}  // namespace

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 256 << 20);
  mallopt(M_ARENA_MAX, 1);
#endif
  CLI::App app{"Acceptance criteria, one PASS/FAIL line each", "acceptance"};
  std::string ml100k = DIET_ML100K_PATH;
  std::string out = "acceptance-out";
  std::vector<int> only;
  app.add_option("--ml100k", ml100k, "MovieLens-100K u.data");
  app.add_option("--out", out, "Scratch and artifact directory");
  app.add_option("--only", only, "Run only these criteria (1-11)")->check(CLI::Range(1, 11));
  CLI11_PARSE(app, argc, argv);

  auto wanted = [&](int i) { return only.empty() || std::count(only.begin(), only.end(), i) > 0; };
  int failed = 0;
  auto report = [&](int i, const char* name, const std::function<Outcome()>& f) {
    if (!wanted(i)) return;
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      o = f();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failed += !o.pass;
    std::printf("[%s] %2d %s: %s (%.1f s)\n", o.pass ? "PASS" : "FAIL", i, name, o.detail.c_str(), secs);
    std::fflush(stdout);
  };

  fs::create_directories(out);
  report(1, "transmission ratio", [&] { return transmission_ratio(ml100k); });

  if (wanted(2) || wanted(3)) {
    if (!fs::exists(ml100k)) {
      report(2, "Base vs DIET on ML-100K", [&] { return Outcome{false, "ratings file not found: " + ml100k}; });
      report(3, "ablation ordering", [&] { return Outcome{false, "ratings file not found: " + ml100k}; });
    } else {
      const auto split = load_experiment_split(ml100k_config(ml100k, out, TrainMode::Diet));
      const auto diet_runs = train_mode(ml100k, out, TrainMode::Diet, split);
      if (wanted(2)) {
        report(2, "Base vs DIET on ML-100K", [&] {
          return base_vs_diet(train_mode(ml100k, out, TrainMode::Base, split), diet_runs);
        });
      }
      if (wanted(3)) {
        report(3, "ablation ordering", [&] {
          const auto mg = train_mode(ml100k, out, TrainMode::MG, split);
          const auto mask = train_mode(ml100k, out, TrainMode::MaskOnly, split);
          return ablation(mask, mg, diet_runs);
        });
      }
    }
  }
  report(4, "straight-through contract", ste_contract);
  report(5, "binarizer oracle", binarizer_oracle);
  report(6, "gradient checks", gradient_checks);
  report(7, "DIETING aliasing and parity", dieting);
  report(8, "FLOPs accounting", flops_accounting);
  report(9, "metrics oracle", metrics_oracle);
  report(10, "pipeline determinism", [&] { return determinism(out); });
  report(11, "wire fuzzing", wire_fuzz);
  return failed == 0 ? 0 : 1;
}
