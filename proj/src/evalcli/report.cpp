#include "diet/evalcli/report.hpp"

#include <fstream>
#include <sstream>

#include "diet/error.hpp"
#include "diet/protocol/protocol.hpp"

namespace diet {

namespace {

std::ostringstream csv_stream() {
  std::ostringstream out;
  out.precision(17);
  return out;
}

}  // namespace

std::string curves_csv(std::span<const RunGroup> groups) {
  auto out = csv_stream();
  out << "mode,keep_ratio,seed,epoch,loss,ndcg,hit\n";
  for (const auto& g : groups)
    for (const auto& r : g.runs)
      for (const auto& p : r.curve)
        out << train_mode_name(g.mode) << ',' << g.keep_ratio << ',' << r.seed << ',' << p.epoch << ',' << p.loss << ','
            << p.ndcg << ',' << p.hit << '\n';
  return out.str();
}

std::string runs_csv(std::span<const RunGroup> groups) {
  auto out = csv_stream();
  out << "mode,keep_ratio,seed,ndcg,hit\n";
  for (const auto& g : groups)
    for (const auto& r : g.runs)
      out << train_mode_name(g.mode) << ',' << g.keep_ratio << ',' << r.seed << ',' << r.final.ndcg << ','
          << r.final.hit << '\n';
  return out.str();
}

std::string summary_csv(std::span<const RunGroup> groups) {
  auto out = csv_stream();
  out << "mode,keep_ratio,runs,mean_ndcg,se_ndcg,mean_hit,se_hit\n";
  for (const auto& g : groups) {
    const auto s = summarize(g.runs);
    out << train_mode_name(g.mode) << ',' << g.keep_ratio << ',' << s.runs << ',' << s.mean_ndcg << ',' << s.se_ndcg
        << ',' << s.mean_hit << ',' << s.se_hit << '\n';
  }
  return out.str();
}

std::vector<double> mean_zero_row_fractions(const Model& model, std::span<const TestCase> test) {
  if (test.empty()) throw DataError("zero-row statistics need at least one test history");
  std::vector<double> total(model.backbone.layers.size(), 0.0);
  for (const auto& tc : test) {
    const auto mb = apply_diet(model.backbone, model.diet_for(tc.context));
    const auto f = zero_row_fractions(mb);
    for (std::size_t i = 0; i < f.size(); ++i) total[i] += f[i];
  }
  for (double& v : total) v /= static_cast<double>(test.size());
  return total;
}

std::string zero_rows_csv(const BackboneParams& backbone, std::span<const ZeroRowSeries> series) {
  auto out = csv_stream();
  out << "mode,seed,layer,zero_row_pct,nonzero_row_pct\n";
  for (const auto& s : series) {
    if (s.zero_fraction.size() != backbone.layers.size()) throw ShapeError("zero-row series has the wrong layer count");
    for (std::size_t i = 0; i < s.zero_fraction.size(); ++i) {
      const double pct = 100.0 * s.zero_fraction[i];
      out << train_mode_name(s.mode) << ',' << s.seed << ',' << backbone.layers[i].name << ',' << pct << ','
          << 100.0 - pct << '\n';
    }
  }
  return out.str();
}

void write_text(const std::filesystem::path& dir, const std::string& name, const std::string& text) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw DataError("cannot create output directory " + dir.string() + ": " + ec.message());
  std::ofstream out(dir / name, std::ios::binary);
  out << text;
  if (!out) throw DataError("cannot write " + (dir / name).string());
}

nlohmann::ordered_json manifest(const std::string& command, const ExperimentConfig& config,
                                const std::vector<std::string>& files) {
  nlohmann::ordered_json j;
  j["command"] = command;
  j["config"] = to_json(config);
  j["files"] = files;
  return j;
}

}  // namespace diet
