#pragma once

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "unihetero/trainer.hpp"

// Run directories: <root>/<id>/{manifest.json, config.json, metrics.jsonl,
// timing.jsonl, completed.json, checkpoints/}.

namespace unihetero {

inline constexpr const char* kCodeVersion = "0.1.0";
inline constexpr const char* kRunRootEnv = "UNIHETERO_RUNS";

/// Slopes are fitted against thousands of samples seen.
inline constexpr double kSamplesPerUnit = 1000.0;

inline std::filesystem::path run_root(const std::string& override_dir = "") {
  if (!override_dir.empty()) return override_dir;
  if (const char* env = std::getenv(kRunRootEnv); env && *env) return env;
  return "runs";
}

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

inline std::string run_config_digest(const RunConfig& rc) { return to_hex(config_digest(nlohmann::json(rc))); }

struct CorpusRef {
  std::filesystem::path path;
  std::string digest;
  std::uint64_t seed = 0;
  std::size_t count = 0;
};

inline CorpusRef corpus_ref(const std::filesystem::path& dir, const nlohmann::json& manifest) {
  return {std::filesystem::absolute(dir), manifest.at("corpus_digest").get<std::string>(), manifest.at("seed").get<std::uint64_t>(),
          manifest.at("count").get<std::size_t>()};
}

/// Written once before training starts.
inline nlohmann::json make_run_manifest(const std::string& id, const RunConfig& rc, const CorpusRef& corpus) {
  return {{"id", id},
          {"code_version", kCodeVersion},
          {"seed", rc.train.seed},
          {"config", nlohmann::json(rc)},
          {"config_digest", run_config_digest(rc)},
          {"corpus", {{"path", corpus.path.string()}, {"digest", corpus.digest}, {"seed", corpus.seed}, {"count", corpus.count}}},
          {"started_at", utc_timestamp()},
          {"artifacts",
           {{"config", "config.json"},
            {"metrics", "metrics.jsonl"},
            {"timing", "timing.jsonl"},
            {"final_checkpoint", "checkpoints/final.uhck"},
            {"completion", "completed.json"}}}};
}

inline std::filesystem::path completion_path(const RunPaths& p) { return p.dir / "completed.json"; }

/// A run counts as complete when its manifest matches `rc` and the corpus,
/// and the completion marker exists.
inline bool run_is_complete(const RunPaths& p, const RunConfig& rc, const std::string& corpus_digest) {
  if (!std::filesystem::exists(p.manifest()) || !std::filesystem::exists(completion_path(p)) ||
      !std::filesystem::exists(p.final_checkpoint()))
    return false;
  try {
    const auto m = nlohmann::json::parse(read_text(p.manifest()));
    return m.at("config_digest").get<std::string>() == run_config_digest(rc) && m.at("corpus").at("digest").get<std::string>() == corpus_digest;
  } catch (const std::exception&) {
    return false;
  }
}

inline RunConfig read_run_config(const RunPaths& p) {
  if (!std::filesystem::exists(p.config())) throw std::runtime_error("no config.json in " + p.dir.string());
  return nlohmann::json::parse(read_text(p.config())).get<RunConfig>();
}

/// Rebuilds the model of a finished run from its config and final checkpoint.
template <class T>
UnifiedModel<T> load_run_model(const RunPaths& p, const std::filesystem::path& checkpoint = {}) {
  const auto rc = read_run_config(p);
  UnifiedModel<T> model(rc.model);
  auto state = model.state();
  load_checkpoint(checkpoint.empty() ? p.final_checkpoint() : checkpoint, state, nlohmann::json(rc));
  return model;
}

// ---------------------------------------------------------------- reporting

inline std::vector<std::pair<double, double>> metric_points(const std::vector<MetricRecord>& timeline, const std::string& metric) {
  std::vector<std::pair<double, double>> pts;
  for (const auto& r : timeline) {
    const nlohmann::json j = r;
    if (!j.contains(metric)) throw std::invalid_argument("unknown metric '" + metric + "'");
    pts.emplace_back(static_cast<double>(r.samples_seen) / kSamplesPerUnit, j.at(metric).get<double>());
  }
  return pts;
}

struct ReportRow {
  std::string id;
  double qa_acc_final = 0.0;
  ScalingFit fit;
};

inline ReportRow report_row(const std::string& id, const std::vector<MetricRecord>& timeline, double burn_in) {
  if (timeline.empty()) throw std::runtime_error("run " + id + " has no metrics");
  ReportRow row{id, timeline.back().qa_accuracy, {}};
  row.fit = fit_scaling(after_burn_in(metric_points(timeline, "qa_accuracy"), burn_in));
  return row;
}

inline std::string report_csv(const std::vector<ReportRow>& rows, bool raw = false) {
  std::ostringstream os;
  os << "id,qa_acc_final,slope_a,intercept_b\n";
  for (const auto& r : rows) {
    os << r.id << ',' << std::fixed << std::setprecision(4) << r.qa_acc_final << ',';
    if (raw)
      os << std::scientific << std::setprecision(6) << r.fit.a;
    else
      os << format_slope(r.fit.a);
    os << ',' << std::fixed << std::setprecision(4) << r.fit.b << '\n';
  }
  return os.str();
}

inline std::string scaling_csv(const std::vector<std::pair<double, double>>& pts, const ScalingFit& fit) {
  std::ostringstream os;
  os << "n,y,fit\n" << std::setprecision(10);
  for (const auto& [x, y] : pts) os << x << ',' << y << ',' << fit.a * x + fit.b << '\n';
  return os.str();
}

/// Line chart of the metric with the fitted line dashed.
inline std::string scaling_svg(const std::vector<std::pair<double, double>>& pts, const ScalingFit& fit, const std::string& title) {
  const double w = 640, h = 400, m = 50;
  double x0 = pts.front().first, x1 = x0, y0 = pts.front().second, y1 = y0;
  for (const auto& [x, y] : pts) {
    x0 = std::min(x0, x);
    x1 = std::max(x1, x);
    y0 = std::min({y0, y, fit.a * x + fit.b});
    y1 = std::max({y1, y, fit.a * x + fit.b});
  }
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  auto sx = [&](double x) { return m + (x - x0) / (x1 - x0) * (w - 2 * m); };
  auto sy = [&](double y) { return h - m - (y - y0) / (y1 - y0) * (h - 2 * m); };
  std::ostringstream os;
  os << std::setprecision(6);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << m << "\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\">" << title << " (a = " << format_slope(fit.a)
     << ")</text>\n";
  os << "<line x1=\"" << m << "\" y1=\"" << h - m << "\" x2=\"" << w - m << "\" y2=\"" << h - m << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << m << "\" y1=\"" << m << "\" x2=\"" << m << "\" y2=\"" << h - m << "\" stroke=\"black\"/>\n";
  os << "<text x=\"" << w / 2 << "\" y=\"" << h - 12 << "\" font-family=\"sans-serif\" font-size=\"12\">samples seen (k)</text>\n";
  os << "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"";
  for (const auto& [x, y] : pts) os << sx(x) << ',' << sy(y) << ' ';
  os << "\"/>\n";
  os << "<line x1=\"" << sx(x0) << "\" y1=\"" << sy(fit.a * x0 + fit.b) << "\" x2=\"" << sx(x1) << "\" y2=\"" << sy(fit.a * x1 + fit.b)
     << "\" stroke=\"firebrick\" stroke-dasharray=\"6,4\" stroke-width=\"2\"/>\n";
  os << "</svg>\n";
  return os.str();
}

}  // namespace unihetero
