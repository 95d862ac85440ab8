#include "diet/evalcli/cli.hpp"

#include <algorithm>
#include <fstream>
#include <optional>
#include <sstream>

#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "json.hpp"

#include "diet/error.hpp"
#include "diet/evalcli/experiment.hpp"
#include "diet/evalcli/report.hpp"
#include "diet/protocol/protocol.hpp"

namespace diet {

namespace {

using ojson = nlohmann::ordered_json;

struct Options {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string model_path;
  // diet
  std::optional<UserId> user;
  std::string history;
  std::string out_file;
  // simulate
  std::string mode;
  std::size_t scenarios = 1;
  std::string policy = "per-session";
  std::size_t session_length = 5;
  std::size_t shift_every = 0;
  std::int64_t session_gap = 1800;
  bool dense = false;
  // report
  std::string sweep;
  std::vector<std::string> curves;
  bool zero_rows = false;
};

ExperimentConfig resolve_config(const Options& o) {
  ExperimentConfig c = o.config_path.empty() ? ExperimentConfig{} : load_experiment_config(o.config_path);
  apply_overrides(c, o.overrides);
  return c;
}

void finish(const ExperimentConfig& c, const std::string& command, std::vector<std::string> files, std::ostream& out,
            ojson result) {
  files.push_back("manifest.json");
  auto m = manifest(command, c, files);
  m["result"] = result;
  write_text(c.output_dir, "manifest.json", m.dump(2) + "\n");
  out << result.dump(2) << "\n";
}

/// A checkpoint when given, else the untrained model of the configured mode.
Model obtain_model(const ExperimentConfig& c, const Split& split, const std::string& path) {
  if (!path.empty()) {
    Model m = load_model(path);
    if (m.backbone.n_items != split.n_items)
      throw DataError("model has " + std::to_string(m.backbone.n_items) + " items but the split has " +
                      std::to_string(split.n_items));
    return m;
  }
  TrainConfig tc = c.train;
  tc.epochs = 0;
  tc.seed = c.seeds.front();
  return fit(tc, split, experiment_backbone(c, split.n_items, tc.seed)).model;
}

Sequence parse_history(const std::string& text) {
  Sequence s;
  std::stringstream in(text);
  std::string field;
  while (std::getline(in, field, ',')) {
    try {
      std::size_t used = 0;
      s.push_back(static_cast<ItemId>(std::stol(field, &used)));
      if (used != field.size()) throw std::invalid_argument(field);
    } catch (const std::logic_error&) {
      throw ConfigError("history entry '" + field + "' is not an item id");
    }
  }
  if (s.empty()) throw ConfigError("history is empty");
  return s;
}

ojson metrics_json(const EvalResult& r) {
  return ojson{{"ndcg", r.ndcg}, {"hit", r.hit}, {"users", r.users}, {"exclude_history", r.exclude_history}};
}

std::string mode_file(TrainMode m, std::uint64_t seed, const char* stem, const char* ext) {
  return std::string(stem) + "-" + std::string(train_mode_name(m)) + "-seed" + std::to_string(seed) + ext;
}

// ------------------------------------------------------------- commands

void cmd_ingest(const Options& o, std::ostream& out) {
  auto c = resolve_config(o);
  if (c.cache_dir.empty() && c.data != "synthetic-markov") c.cache_dir = c.output_dir / "cache";
  const Split split = load_experiment_split(c);
  const ojson result{{"users", split.n_users},
                     {"items", split.n_items},
                     {"train_users", split.train_users.size()},
                     {"test_cases", split.test.size()},
                     {"train_samples", build_sequences(split, c.hyper.max_len).size()},
                     {"cache_dir", c.cache_dir.string()}};
  finish(c, "ingest", {}, out, result);
}

void cmd_train(const Options& o, std::ostream& out) {
  const auto c = resolve_config(o);
  const Split split = load_experiment_split(c);
  std::vector<std::string> files;
  const auto runs = run_experiment(c, split, [&](const SeedRun& r) {
    const auto ckpt = mode_file(c.train.mode, r.seed, "model", ".ckpt");
    const auto log = mode_file(c.train.mode, r.seed, "log", ".csv");
    std::filesystem::create_directories(c.output_dir);
    save_model(c.output_dir / ckpt, r.model);
    write_text(c.output_dir, log, log_csv(r.log));
    files.push_back(ckpt);
    files.push_back(log);
    spdlog::info("seed {}: NDCG@{} {:.4f}, Hit@{} {:.4f}", r.seed, c.top_n, r.final.ndcg, c.top_n, r.final.hit);
  });
  const std::vector<RunGroup> groups{RunGroup{c.train.mode, c.train.keep_ratio, runs}};
  write_text(c.output_dir, "curves.csv", curves_csv(groups));
  write_text(c.output_dir, "runs.csv", runs_csv(groups));
  write_text(c.output_dir, "summary.csv", summary_csv(groups));
  files.insert(files.end(), {"curves.csv", "runs.csv", "summary.csv"});
  const auto s = summarize(runs);
  finish(c, "train", files, out,
         ojson{{"mode", train_mode_name(c.train.mode)},
               {"runs", s.runs},
               {"mean_ndcg", s.mean_ndcg},
               {"se_ndcg", s.se_ndcg},
               {"mean_hit", s.mean_hit},
               {"se_hit", s.se_hit}});
}

void cmd_eval(const Options& o, std::ostream& out) {
  const auto c = resolve_config(o);
  const Split split = load_experiment_split(c);
  const Model m = obtain_model(c, split, o.model_path);
  const auto r = evaluate(model_scorer(m), split.test, c.top_n, c.exclude_history);
  auto result = metrics_json(r);
  result["mode"] = train_mode_name(m.mode);
  result["model"] = o.model_path.empty() ? "untrained" : o.model_path;
  finish(c, "eval", {}, out, result);
}

void cmd_diet(const Options& o, std::ostream& out) {
  const auto c = resolve_config(o);
  const Split split = load_experiment_split(c);
  const Model m = obtain_model(c, split, o.model_path);
  if (o.user.has_value() == !o.history.empty()) throw ConfigError("diet needs exactly one of --user or --history");
  Sequence history;
  std::string label;
  if (o.user) {
    const auto it = std::find_if(split.test.begin(), split.test.end(), [&](const TestCase& t) { return t.user == *o.user; });
    if (it == split.test.end()) throw DataError("user " + std::to_string(*o.user) + " is not a test user");
    history = it->context;
    label = "user" + std::to_string(*o.user);
  } else {
    history = parse_history(o.history);
    label = "history";
  }
  for (ItemId i : history)
    if (i < 0 || static_cast<std::size_t>(i) >= m.backbone.n_items)
      throw DataError("history item " + std::to_string(i) + " is not in the catalog");
  const Diet d = m.diet_for(history);
  const auto bytes = encode_diet(d);
  // The edge-side decode must reproduce the diet exactly.
  if (!(decode_diet(bytes, m.backbone, d.keep_ratio) == d)) throw NumericError("diet did not survive the wire");
  const std::string name = o.out_file.empty() ? "diet-" + label + ".bin" : o.out_file;
  write_text(c.output_dir, name, std::string(bytes.begin(), bytes.end()));

  std::uint64_t kept = 0;
  for (const auto& l : d.layers) kept += l.popcount();
  const std::uint64_t n = m.backbone.maskable_count();
  const auto mb = apply_diet(m.backbone, d);
  ojson layers = ojson::array();
  const auto zero = zero_row_fractions(mb);
  for (std::size_t i = 0; i < d.layers.size(); ++i)
    layers.push_back(ojson{{"name", d.layers[i].name},
                           {"size", d.layers[i].bits.size()},
                           {"kept", d.layers[i].popcount()},
                           {"zero_row_fraction", zero[i]}});
  finish(c, "diet", {name}, out,
         ojson{{"mode", train_mode_name(m.mode)},
               {"keep_ratio", d.keep_ratio},
               {"history_length", history.size()},
               {"maskable_params", n},
               {"kept", kept},
               {"wire_bytes", bytes.size()},
               {"dense_bits", transmission_bits(TransmitMethod::Dense, n, 1.0)},
               {"binary_bits", diet_wire_bits(d)},
               {"flops", count_flops(mb, std::min(history.size(), m.backbone.hyper.max_len))},
               {"dense_flops", dense_flops(m.backbone, std::min(history.size(), m.backbone.hyper.max_len))},
               {"layers", layers}});
}

void cmd_simulate(const Options& o, std::ostream& out) {
  Options opt = o;
  if (!o.mode.empty()) opt.overrides.push_back("mode=" + o.mode);
  const auto c = resolve_config(opt);
  const Split split = load_experiment_split(c);
  const Model m = obtain_model(c, split, o.model_path);
  CloudSide cloud;
  cloud.backbone = &m.backbone;
  cloud.keep_ratio = m.keep_ratio;
  cloud.dense_shipping = o.dense || m.mode == TrainMode::Base;
  cloud.storage = m.mode == TrainMode::Dieting ? StorageMode::Dieting : StorageMode::Diet;
  if (!cloud.dense_shipping) cloud.diet_for = [&m](std::span<const ItemId> h) { return m.diet_for(h); };
  SimConfig sc;
  sc.policy = parse_refresh_policy(o.policy);
  sc.session_gap = o.session_gap;
  sc.scenarios = o.scenarios;
  sc.top_n = c.top_n;
  sc.exclude_history = c.exclude_history;
  if (o.session_length == 0) throw ConfigError("session length must be positive");
  const auto events = events_from_test(split.test, o.session_length, o.shift_every, o.session_gap);
  const auto report = simulate_session(cloud, events, split.test, sc);
  write_text(c.output_dir, "simulate.csv", sim_report_csv(report));
  write_text(c.output_dir, "simulate.json", sim_report_json(report));
  const auto& a = report.aggregate;
  finish(c, "simulate", {"simulate.csv", "simulate.json"}, out,
         ojson{{"mode", train_mode_name(m.mode)},
               {"policy", refresh_policy_name(sc.policy)},
               {"scenarios", sc.scenarios},
               {"dense_shipping", cloud.dense_shipping},
               {"refreshes", report.refreshes},
               {"transmit_bits", a.transmit_bits},
               {"storage_bits", a.storage_bits},
               {"flops", a.flops},
               {"ndcg_at_10", a.ndcg_at_10},
               {"hit_at_10", a.hit_at_10}});
}

void cmd_report(const Options& o, std::ostream& out) {
  const auto base = resolve_config(o);
  if (o.sweep.empty() && o.curves.empty() && !o.zero_rows)
    throw ConfigError("report needs --sweep keep_ratio, --curves or --zero-rows");
  if (!o.sweep.empty() && o.sweep != "keep_ratio") throw ConfigError("only keep_ratio can be swept, not " + o.sweep);
  const Split split = load_experiment_split(base);
  std::vector<std::string> files;
  ojson result;

  if (!o.curves.empty()) {
    std::vector<RunGroup> groups;
    for (const auto& name : o.curves) {
      auto c = base;
      c.train.mode = parse_train_mode(name);
      c.eval_every_epoch = true;
      spdlog::info("curves: training {}", name);
      groups.push_back(RunGroup{c.train.mode, c.train.keep_ratio, run_experiment(c, split)});
    }
    write_text(base.output_dir, "curves.csv", curves_csv(groups));
    write_text(base.output_dir, "curves_summary.csv", summary_csv(groups));
    files.insert(files.end(), {"curves.csv", "curves_summary.csv"});
    result["curves"] = o.curves;
  }
  if (!o.sweep.empty()) {
    std::vector<RunGroup> groups;
    for (double keep : kSweepKeepRatios) {
      auto c = base;
      c.train.keep_ratio = keep;
      spdlog::info("sweep: keep ratio {}", keep);
      groups.push_back(RunGroup{c.train.mode, keep, run_experiment(c, split)});
    }
    write_text(base.output_dir, "sweep.csv", runs_csv(groups));
    write_text(base.output_dir, "sweep_summary.csv", summary_csv(groups));
    files.insert(files.end(), {"sweep.csv", "sweep_summary.csv"});
    result["sweep"] = o.sweep;
    result["keep_ratios"] = kSweepKeepRatios;
  }
  if (o.zero_rows) {
    std::vector<ZeroRowSeries> series;
    std::optional<BackboneParams> shape;
    for (TrainMode mode : {TrainMode::MG, TrainMode::Diet}) {
      auto c = base;
      c.train.mode = mode;
      spdlog::info("zero rows: training {}", train_mode_name(mode));
      for (const auto& r : run_experiment(c, split)) {
        series.push_back(ZeroRowSeries{mode, r.seed, mean_zero_row_fractions(r.model, split.test)});
        if (!shape) shape = r.model.backbone;
      }
    }
    write_text(base.output_dir, "zero_rows.csv", zero_rows_csv(*shape, series));
    files.push_back("zero_rows.csv");
    result["zero_rows"] = true;
  }
  finish(base, "report", files, out, result);
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Per-user sparse model diets for on-device recommendation", "diet-cli"};
  app.require_subcommand(1);
  app.fallthrough();
  Options o;
  app.add_option("--config", o.config_path, "Flat JSON experiment config");
  app.add_option("--set", o.overrides, "Config override key=value (repeatable)");

  auto* ingest = app.add_subcommand("ingest", "Parse, filter and split a log; fill the split cache");
  auto* train = app.add_subcommand("train", "Train one model per seed; write checkpoints, logs and summaries");
  auto* eval = app.add_subcommand("eval", "NDCG/Hit of a checkpoint (or an untrained model) on the test split");
  eval->add_option("--model", o.model_path, "Model checkpoint");
  auto* diet = app.add_subcommand("diet", "Generate and encode the diet for one history");
  diet->add_option("--model", o.model_path, "Model checkpoint");
  diet->add_option("--user", o.user, "A test user whose context is the history");
  diet->add_option("--history", o.history, "Comma-separated item ids, oldest first");
  diet->add_option("--out", o.out_file, "Wire file name inside the output directory");
  auto* simulate = app.add_subcommand("simulate", "Replay test users through the cloud/edge protocol");
  simulate->add_option("--model", o.model_path, "Model checkpoint");
  simulate->add_option("--mode", o.mode, "Mode of the untrained model when no checkpoint is given");
  simulate->add_option("--scenarios", o.scenarios, "Stored diets per edge")->check(CLI::PositiveNumber);
  simulate->add_option("--policy", o.policy, "per-session or on-shift");
  simulate->add_option("--session-length", o.session_length, "Events per replayed session");
  simulate->add_option("--shift-every", o.shift_every, "Flag every k-th event as an interest shift (0: never)");
  simulate->add_option("--session-gap", o.session_gap, "Seconds of inactivity that end a session");
  simulate->add_flag("--dense", o.dense, "Ship dense weights instead of diets");
  auto* report = app.add_subcommand("report", "Emit the data series behind the curves, sweep and zero-row plots");
  report->add_option("--sweep", o.sweep, "Parameter to sweep (keep_ratio)");
  report->add_option("--curves", o.curves, "Modes whose training curves to record");
  report->add_flag("--zero-rows", o.zero_rows, "Per-layer zero-row shares of MG and DIET diets");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  }

  try {
    if (*ingest) cmd_ingest(o, out);
    if (*train) cmd_train(o, out);
    if (*eval) cmd_eval(o, out);
    if (*diet) cmd_diet(o, out);
    if (*simulate) cmd_simulate(o, out);
    if (*report) cmd_report(o, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const ShapeError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitInternal;
  }
  return kExitOk;
}

}  // namespace diet
