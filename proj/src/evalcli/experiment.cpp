#include "diet/evalcli/experiment.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include "diet/error.hpp"
#include "diet/numerics/rng.hpp"

namespace diet {

namespace {

using json = nlohmann::json;

template <typename T>
T get_as(const json& v, const std::string& key) {
  try {
    return v.get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config key '" + key + "' has the wrong type: " + v.dump());
  }
}

std::size_t get_count(const json& v, const std::string& key) {
  if (!v.is_number_integer() || v.get<std::int64_t>() < 0)
    throw ConfigError("config key '" + key + "' must be a non-negative integer, got " + v.dump());
  return v.get<std::size_t>();
}

using Setter = std::function<void(ExperimentConfig&, const json&, const std::string&)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"data", [](auto& c, const json& v, const auto& k) { c.data = get_as<std::string>(v, k); }},
      {"format", [](auto& c, const json& v, const auto& k) { c.format = parse_log_format(get_as<std::string>(v, k)); }},
      {"synthetic_users", [](auto& c, const json& v, const auto& k) { c.synthetic_users = get_count(v, k); }},
      {"synthetic_items", [](auto& c, const json& v, const auto& k) { c.synthetic_items = get_count(v, k); }},
      {"synthetic_length", [](auto& c, const json& v, const auto& k) { c.synthetic_length = get_count(v, k); }},
      {"synthetic_noise", [](auto& c, const json& v, const auto& k) { c.synthetic_noise = get_as<double>(v, k); }},
      {"synthetic_seed", [](auto& c, const json& v, const auto& k) { c.synthetic_seed = get_count(v, k); }},
      {"split", [](auto& c, const json& v, const auto& k) { c.split.kind = parse_split_kind(get_as<std::string>(v, k)); }},
      {"k_core", [](auto& c, const json& v, const auto& k) { c.split.k_core = get_count(v, k); }},
      {"positive_threshold",
       [](auto& c, const json& v, const auto& k) { c.split.positive_threshold = get_as<double>(v, k); }},
      {"split_seed", [](auto& c, const json& v, const auto& k) { c.split.seed = get_count(v, k); }},
      {"arch", [](auto& c, const json& v, const auto& k) { c.arch = parse_arch(get_as<std::string>(v, k)); }},
      {"d", [](auto& c, const json& v, const auto& k) { c.hyper.d = get_count(v, k); }},
      {"blocks", [](auto& c, const json& v, const auto& k) { c.hyper.blocks = get_count(v, k); }},
      {"heads", [](auto& c, const json& v, const auto& k) { c.hyper.heads = get_count(v, k); }},
      {"max_len", [](auto& c, const json& v, const auto& k) { c.hyper.max_len = get_count(v, k); }},
      {"horiz_filters", [](auto& c, const json& v, const auto& k) { c.hyper.horiz_filters = get_count(v, k); }},
      {"vert_filters", [](auto& c, const json& v, const auto& k) { c.hyper.vert_filters = get_count(v, k); }},
      {"max_horiz_height", [](auto& c, const json& v, const auto& k) { c.hyper.max_horiz_height = get_count(v, k); }},
      {"mode", [](auto& c, const json& v, const auto& k) { c.train.mode = parse_train_mode(get_as<std::string>(v, k)); }},
      {"keep_ratio", [](auto& c, const json& v, const auto& k) { c.train.keep_ratio = get_as<double>(v, k); }},
      {"epochs", [](auto& c, const json& v, const auto& k) { c.train.epochs = get_count(v, k); }},
      {"batch_size", [](auto& c, const json& v, const auto& k) { c.train.batch_size = get_count(v, k); }},
      {"lr", [](auto& c, const json& v, const auto& k) { c.train.lr_base = get_as<double>(v, k); }},
      {"cycle_length", [](auto& c, const json& v, const auto& k) { c.train.cycle_length = get_count(v, k); }},
      {"negatives", [](auto& c, const json& v, const auto& k) { c.train.negatives_per_positive = get_count(v, k); }},
      {"train_item_embedding",
       [](auto& c, const json& v, const auto& k) { c.train.train_item_embedding = get_as<bool>(v, k); }},
      {"verify_frozen", [](auto& c, const json& v, const auto& k) { c.train.verify_frozen = get_as<bool>(v, k); }},
      {"seeds",
       [](auto& c, const json& v, const auto& k) {
         if (!v.is_array()) throw ConfigError("config key '" + k + "' must be an array of seeds");
         c.seeds.clear();
         for (const auto& s : v) c.seeds.push_back(get_count(s, k));
       }},
      {"top_n", [](auto& c, const json& v, const auto& k) { c.top_n = get_count(v, k); }},
      {"exclude_history", [](auto& c, const json& v, const auto& k) { c.exclude_history = get_as<bool>(v, k); }},
      {"eval_every_epoch", [](auto& c, const json& v, const auto& k) { c.eval_every_epoch = get_as<bool>(v, k); }},
      {"output_dir", [](auto& c, const json& v, const auto& k) { c.output_dir = get_as<std::string>(v, k); }},
      {"cache_dir", [](auto& c, const json& v, const auto& k) { c.cache_dir = get_as<std::string>(v, k); }},
  };
  return table;
}

void apply_key(ExperimentConfig& c, const std::string& key, const json& value) {
  const auto it = setters().find(key);
  if (it == setters().end()) throw ConfigError("unknown config key '" + key + "'");
  it->second(c, value, key);
}

constexpr const char* kSynthetic = "synthetic-markov";

}  // namespace

void validate(const ExperimentConfig& c) {
  if (c.seeds.empty()) throw ConfigError("at least one seed is required");
  if (c.top_n == 0) throw ConfigError("top_n must be positive");
  if (c.data.empty()) throw ConfigError("data must name a log file or synthetic-markov");
  if (c.data == kSynthetic && (c.synthetic_users == 0 || c.synthetic_items < 2 || c.synthetic_length < 3))
    throw ConfigError("synthetic data needs users >= 1, items >= 2 and length >= 3");
  if (!(c.synthetic_noise >= 0.0 && c.synthetic_noise <= 1.0)) throw ConfigError("synthetic_noise must lie in [0, 1]");
  if (c.hyper.d == 0 || c.hyper.max_len == 0) throw ConfigError("d and max_len must be positive");
  validate(c.train);
}

nlohmann::ordered_json to_json(const ExperimentConfig& c) {
  nlohmann::ordered_json j;
  j["data"] = c.data;
  j["format"] = log_format_name(c.format);
  if (c.data == kSynthetic) {
    j["synthetic_users"] = c.synthetic_users;
    j["synthetic_items"] = c.synthetic_items;
    j["synthetic_length"] = c.synthetic_length;
    j["synthetic_noise"] = c.synthetic_noise;
    j["synthetic_seed"] = c.synthetic_seed;
  }
  j["split"] = split_kind_name(c.split.kind);
  j["k_core"] = c.split.k_core;
  j["positive_threshold"] = c.split.positive_threshold;
  j["split_seed"] = c.split.seed;
  j["arch"] = arch_name(c.arch);
  j["d"] = c.hyper.d;
  j["blocks"] = c.hyper.blocks;
  j["heads"] = c.hyper.heads;
  j["max_len"] = c.hyper.max_len;
  j["horiz_filters"] = c.hyper.horiz_filters;
  j["vert_filters"] = c.hyper.vert_filters;
  j["max_horiz_height"] = c.hyper.max_horiz_height;
  j["mode"] = train_mode_name(c.train.mode);
  j["keep_ratio"] = c.train.keep_ratio;
  j["epochs"] = c.train.epochs;
  j["batch_size"] = c.train.batch_size;
  j["lr"] = c.train.lr_base;
  j["cycle_length"] = c.train.cycle_length;
  j["negatives"] = c.train.negatives_per_positive;
  j["train_item_embedding"] = c.train.train_item_embedding;
  j["verify_frozen"] = c.train.verify_frozen;
  j["seeds"] = c.seeds;
  j["top_n"] = c.top_n;
  j["exclude_history"] = c.exclude_history;
  j["eval_every_epoch"] = c.eval_every_epoch;
  j["output_dir"] = c.output_dir.string();
  j["cache_dir"] = c.cache_dir.string();
  return j;
}

ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  ExperimentConfig c;
  for (const auto& [key, value] : j.items()) apply_key(c, key, value);
  validate(c);
  return c;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  return experiment_config_from_json(j);
}

void apply_overrides(ExperimentConfig& c, const std::vector<std::string>& assignments) {
  for (const auto& a : assignments) {
    const auto eq = a.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + a + "' is not key=value");
    const std::string key = a.substr(0, eq);
    const std::string text = a.substr(eq + 1);
    json value = json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;
    apply_key(c, key, value);
  }
  validate(c);
}

Split load_experiment_split(const ExperimentConfig& c) {
  if (c.data == kSynthetic) {
    const auto log =
        synthetic_markov(c.synthetic_users, c.synthetic_items, c.synthetic_length, c.synthetic_noise, c.synthetic_seed);
    // Generated walks carry no ratings worth filtering; only the core step applies.
    return split_log(kcore_filter(log, c.split.k_core), c.split);
  }
  if (!std::filesystem::exists(c.data)) throw DataError("data file not found: " + c.data);
  return load_split(c.data, c.format, c.split, c.cache_dir);
}

BackboneParams experiment_backbone(const ExperimentConfig& c, std::size_t n_items, std::uint64_t seed) {
  num::Rng rng(seed);
  return build_backbone(c.arch, n_items, c.hyper, rng);
}

Summary summarize(const std::vector<SeedRun>& runs) {
  Summary s;
  s.runs = runs.size();
  if (runs.empty()) return s;
  const double n = static_cast<double>(runs.size());
  for (const auto& r : runs) {
    s.mean_ndcg += r.final.ndcg;
    s.mean_hit += r.final.hit;
  }
  s.mean_ndcg /= n;
  s.mean_hit /= n;
  if (runs.size() > 1) {
    double vn = 0.0, vh = 0.0;
    for (const auto& r : runs) {
      vn += (r.final.ndcg - s.mean_ndcg) * (r.final.ndcg - s.mean_ndcg);
      vh += (r.final.hit - s.mean_hit) * (r.final.hit - s.mean_hit);
    }
    s.se_ndcg = std::sqrt(vn / (n - 1.0) / n);
    s.se_hit = std::sqrt(vh / (n - 1.0) / n);
  }
  return s;
}

Scorer model_scorer(const Model& m) {
  return [&m](std::span<const ItemId> ctx) { return m.scores_for(ctx); };
}

std::vector<SeedRun> run_experiment(const ExperimentConfig& c, const Split& split, const RunCallback& on_run) {
  validate(c);
  if (split.test.empty()) throw DataError("the split has no test cases");
  std::vector<SeedRun> runs;
  for (std::uint64_t seed : c.seeds) {
    SeedRun run;
    run.seed = seed;
    TrainConfig tc = c.train;
    tc.seed = seed;
    const auto bb = experiment_backbone(c, split.n_items, seed);
    auto result = fit(tc, split, bb, [&](std::size_t epoch, const Model& m, double loss) {
      EpochPoint p{epoch, loss, std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
      if (c.eval_every_epoch) {
        const auto r = evaluate(model_scorer(m), split.test, c.top_n, c.exclude_history);
        p.ndcg = r.ndcg;
        p.hit = r.hit;
      }
      run.curve.push_back(p);
    });
    run.log = std::move(result.log);
    run.model = std::move(result.model);
    run.final = evaluate(model_scorer(run.model), split.test, c.top_n, c.exclude_history);
    if (on_run) on_run(run);
    runs.push_back(std::move(run));
  }
  return runs;
}

}  // namespace diet
