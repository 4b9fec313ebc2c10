#pragma once

// Side-by-side table of finished runs read back from their metrics files.

#include "smcwake/harness/experiment.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

namespace smcwake::harness {

struct MetricsRow {
  int step = 0;
  std::string method;
  double fwd_kl = 0.0;
  double rev_kl = 0.0;
  double sym_kl = 0.0;
  double mean_log_C = 0.0;
  double mean_ess = 0.0;
  double wall_ms = 0.0;
};

class MismatchedRuns : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline double parse_metric(const std::string& s) {
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  std::size_t used = 0;
  const double v = std::stod(s, &used);
  if (used != s.size()) throw std::invalid_argument("bad number '" + s + "'");
  return v;
}

inline std::vector<MetricsRow> read_metrics_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader) throw std::runtime_error(path + ":1: not a metrics file");
  std::vector<MetricsRow> rows;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 8) throw std::runtime_error(path + ":" + std::to_string(lineno) + ": expected 8 fields");
    try {
      MetricsRow r{std::stoi(f[0]),         f[1],
                   parse_metric(f[2]),      parse_metric(f[3]),
                   parse_metric(f[4]),      parse_metric(f[5]),
                   parse_metric(f[6]),      parse_metric(f[7])};
      if (!rows.empty() && r.step <= rows.back().step) {
        throw std::runtime_error("steps must increase");
      }
      rows.push_back(std::move(r));
    } catch (const std::exception& e) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (rows.empty()) throw std::runtime_error(path + ": no metrics rows");
  return rows;
}

struct ComparedRun {
  std::string path;
  std::string label;
  MetricsRow final_row;
  MetricsRow best_row;  // lowest forward KL
  nlohmann::json model; // null when no summary.json sits next to the file
};

struct ComparisonRow {
  std::string metric;
  std::vector<double> values;
  std::vector<std::size_t> best;  // indices attaining the minimum
  [[nodiscard]] bool tie() const { return best.size() > 1; }
};

struct Comparison {
  std::vector<ComparedRun> runs;
  std::vector<ComparisonRow> rows;
  std::vector<std::string> warnings;
};

// Reads every metrics file and lines up final-step and best-step values.
// Refuses runs whose summaries name different models.
inline Comparison compare_runs(const std::vector<std::string>& paths) {
  namespace fs = std::filesystem;
  if (paths.empty()) throw std::invalid_argument("compare needs at least one metrics file");
  Comparison c;
  for (const auto& p : paths) {
    const auto rows = read_metrics_csv(p);
    ComparedRun r;
    r.path = p;
    r.final_row = rows.back();
    r.best_row = rows.front();
    for (const auto& row : rows) {
      if (!std::isnan(row.fwd_kl) && (std::isnan(r.best_row.fwd_kl) || row.fwd_kl < r.best_row.fwd_kl)) r.best_row = row;
    }
    const fs::path summary = fs::path(p).parent_path() / "summary.json";
    std::string run_name = fs::path(p).parent_path().filename().string();
    if (fs::exists(summary)) {
      std::ifstream in(summary);
      const auto j = nlohmann::json::parse(in, nullptr, false);
      if (!j.is_discarded() && j.contains("model")) {
        r.model = {{"model", j["model"]}, {"seed", j.value("seed", 0ULL)}, {"n", j.value("n", 0)}};
      }
    } else {
      c.warnings.push_back("no summary.json next to " + p + "; model spec not checked");
    }
    r.label = r.final_row.method + (run_name.empty() ? "" : " [" + run_name + "]");
    if (!r.model.is_null()) {
      for (const auto& prev : c.runs) {
        if (!prev.model.is_null() && prev.model != r.model) {
          throw MismatchedRuns("model spec of " + p + " differs from " + prev.path + ": " + r.model.dump() + " vs " +
                               prev.model.dump());
        }
      }
    }
    c.runs.push_back(std::move(r));
  }

  auto add_row = [&](const std::string& name, auto pick) {
    ComparisonRow row{name, {}, {}};
    double lo = std::numeric_limits<double>::infinity();
    for (const auto& r : c.runs) {
      const double v = pick(r);
      row.values.push_back(v);
      if (!std::isnan(v)) lo = std::min(lo, v);
    }
    for (std::size_t i = 0; i < row.values.size(); ++i) {
      if (!std::isnan(row.values[i]) && row.values[i] == lo) row.best.push_back(i);
    }
    c.rows.push_back(std::move(row));
  };
  add_row("final fwd_kl", [](const ComparedRun& r) { return r.final_row.fwd_kl; });
  add_row("final rev_kl", [](const ComparedRun& r) { return r.final_row.rev_kl; });
  add_row("final sym_kl", [](const ComparedRun& r) { return r.final_row.sym_kl; });
  add_row("best fwd_kl", [](const ComparedRun& r) { return r.best_row.fwd_kl; });
  add_row("best step", [](const ComparedRun& r) { return static_cast<double>(r.best_row.step); });
  c.rows.back().best.clear();  // a step index has no winner
  add_row("final step", [](const ComparedRun& r) { return static_cast<double>(r.final_row.step); });
  c.rows.back().best.clear();
  return c;
}

// Fixed-width text; '*' marks the row minimum, '=' a shared minimum.
inline std::string format_comparison(const Comparison& c) {
  std::ostringstream os;
  std::size_t w0 = 14;
  std::vector<std::size_t> w;
  for (const auto& r : c.runs) w.push_back(std::max<std::size_t>(14, r.label.size() + 2));
  os << std::left << std::setw(static_cast<int>(w0)) << "metric";
  for (std::size_t i = 0; i < c.runs.size(); ++i) os << std::setw(static_cast<int>(w[i])) << c.runs[i].label;
  os << '\n';
  for (const auto& row : c.rows) {
    os << std::setw(static_cast<int>(w0)) << row.metric;
    for (std::size_t i = 0; i < row.values.size(); ++i) {
      std::string cell = format_number(row.values[i]);
      if (std::find(row.best.begin(), row.best.end(), i) != row.best.end()) cell += row.tie() ? " =" : " *";
      os << std::setw(static_cast<int>(w[i])) << cell;
    }
    os << '\n';
  }
  for (const auto& wmsg : c.warnings) os << "warning: " << wmsg << '\n';
  return os.str();
}

inline nlohmann::json comparison_json(const Comparison& c) {
  auto num = [](double v) -> nlohmann::json {
    if (std::isfinite(v)) return v;
    return nullptr;
  };
  nlohmann::json runs = nlohmann::json::array();
  for (const auto& r : c.runs) {
    runs.push_back({{"path", r.path}, {"label", r.label}, {"method", r.final_row.method}, {"model", r.model}});
  }
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : c.rows) {
    nlohmann::json vals = nlohmann::json::array();
    for (double v : row.values) vals.push_back(num(v));
    rows.push_back({{"metric", row.metric}, {"values", vals}, {"best", row.best}, {"tie", row.tie()}});
  }
  return {{"runs", runs}, {"rows", rows}, {"warnings", c.warnings}};
}

}  // namespace smcwake::harness
