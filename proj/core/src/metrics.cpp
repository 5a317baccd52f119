#include "clforge/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "clforge/error.hpp"

namespace clforge {

bool is_foreground(double logit) { return logit > 0.0; }

std::vector<double> binarize(std::span<const double> logits) {
  std::vector<double> out(logits.size());
  std::transform(logits.begin(), logits.end(), out.begin(), [](double z) { return is_foreground(z) ? 1.0 : 0.0; });
  return out;
}

double dice(std::span<const double> pred, std::span<const double> gt) {
  if (pred.size() != gt.size()) throw ShapeError("dice: mask sizes differ");
  double inter = 0.0, p = 0.0, g = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool a = pred[i] > 0.5;
    const bool b = gt[i] > 0.5;
    inter += (a && b) ? 1.0 : 0.0;
    p += a ? 1.0 : 0.0;
    g += b ? 1.0 : 0.0;
  }
  if (p + g == 0.0) return 1.0;
  return 2.0 * inter / (p + g);
}

void ResultsMatrix::record_stage(std::vector<double> dice_per_task) {
  if (dice_per_task.size() != rows_.size() + 1) {
    throw PreconditionError("stage " + std::to_string(rows_.size()) + " needs " + std::to_string(rows_.size() + 1) +
                            " task scores, got " + std::to_string(dice_per_task.size()));
  }
  for (double v : dice_per_task) {
    if (!(v >= 0.0 && v <= 1.0)) throw PreconditionError("Dice score outside [0, 1]");
  }
  rows_.push_back(std::move(dice_per_task));
}

double ResultsMatrix::at(std::size_t stage, std::size_t task) const {
  if (stage >= rows_.size() || task > stage) {
    throw PreconditionError("no result for stage " + std::to_string(stage) + ", task " + std::to_string(task));
  }
  return rows_[stage][task];
}

double avg_dice(const ResultsMatrix& m, std::size_t stage) {
  if (m.stages() == 0) throw PreconditionError("avg_dice: no completed tasks");
  const auto& r = m.row(stage);
  return std::accumulate(r.begin(), r.end(), 0.0) / static_cast<double>(r.size());
}

ForgettingReport forgetting_rate(const ResultsMatrix& m) {
  if (m.stages() < 2) throw PreconditionError("forgetting_rate needs at least two completed tasks");
  ForgettingReport report;
  const std::size_t last = m.stages() - 1;
  double total = 0.0;
  std::size_t counted = 0;
  for (std::size_t i = 0; i < last; ++i) {
    double peak = 0.0;
    for (std::size_t s = i; s <= last; ++s) peak = std::max(peak, m.at(s, i));
    if (peak == 0.0) {
      report.per_task.push_back(std::nullopt);
      report.warnings.push_back("task " + std::to_string(i) + " never exceeded Dice 0; forgetting undefined");
      continue;
    }
    const double fr = (peak - m.at(last, i)) / peak * 100.0;
    report.per_task.push_back(fr);
    total += fr;
    ++counted;
  }
  report.average = counted ? total / static_cast<double>(counted) : 0.0;
  return report;
}

namespace {

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string metrics_csv(const ResultsMatrix& m) {
  std::ostringstream os;
  os << "stage,task,dice\n";
  for (std::size_t s = 0; s < m.stages(); ++s) {
    for (std::size_t i = 0; i <= s; ++i) {
      const std::string name = i < m.task_order().size() ? m.task_order()[i] : std::to_string(i);
      os << s << ',' << name << ',' << format_double(m.at(s, i)) << '\n';
    }
  }
  return os.str();
}

ResultsMatrix parse_metrics_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "stage,task,dice") throw FormatError("metrics.csv: bad header");
  std::vector<std::string> order;
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto c1 = line.find(',');
    const auto c2 = line.rfind(',');
    if (c1 == std::string::npos || c1 == c2) throw FormatError("metrics.csv: malformed line '" + line + "'");
    const std::size_t stage = std::stoul(line.substr(0, c1));
    const std::string task = line.substr(c1 + 1, c2 - c1 - 1);
    const double value = std::stod(line.substr(c2 + 1));
    if (stage == rows.size()) rows.emplace_back();
    if (stage + 1 != rows.size()) throw FormatError("metrics.csv: stages out of order");
    const std::size_t idx = rows.back().size();
    if (idx == order.size()) order.push_back(task);
    if (order[idx] != task) throw FormatError("metrics.csv: inconsistent task order");
    rows.back().push_back(value);
  }
  ResultsMatrix m(order);
  for (auto& r : rows) m.record_stage(std::move(r));
  return m;
}

nlohmann::json summary_json(const ResultsMatrix& m, const nlohmann::json& run_info) {
  if (m.stages() == 0) throw PreconditionError("empty experiment: nothing to report");
  nlohmann::json s;
  s["version"] = kReportSchemaVersion;
  s["task_order"] = m.task_order();
  s["stages"] = m.stages();
  s["avg_dice"] = avg_dice(m, m.stages() - 1);
  s["final_dice"] = m.row(m.stages() - 1);
  if (m.stages() >= 2) {
    const auto fr = forgetting_rate(m);
    s["avg_fr"] = fr.average;
    nlohmann::json per = nlohmann::json::array();
    for (const auto& v : fr.per_task) per.push_back(v ? nlohmann::json(*v) : nlohmann::json(nullptr));
    s["per_task_fr"] = per;
    s["warnings"] = fr.warnings;
  } else {
    s["avg_fr"] = nullptr;
    s["per_task_fr"] = nlohmann::json::array();
  }
  for (const auto& key : {"mode", "seed", "suite", "trainable", "allocations", "wall_clock_seconds", "fisher_avg"}) {
    if (run_info.contains(key)) s[key] = run_info[key];
  }
  return s;
}

void write_file_atomic(const std::filesystem::path& path, const std::string& content) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + path.string());
    out << content;
    if (!out) throw Error("write failed for " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void emit_report(const ResultsMatrix& m, const nlohmann::json& run_info, const std::filesystem::path& out_dir) {
  const nlohmann::json summary = summary_json(m, run_info);
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec || !std::filesystem::is_directory(out_dir)) throw Error("cannot create report directory " + out_dir.string());
  write_file_atomic(out_dir / "metrics.csv", metrics_csv(m));
  write_file_atomic(out_dir / "run_info.json", run_info.dump(2) + "\n");
  write_file_atomic(out_dir / "summary.json", summary.dump(2) + "\n");
}

nlohmann::json regenerate_summary(const std::filesystem::path& dir) {
  const ResultsMatrix m = parse_metrics_csv(read_file(dir / "metrics.csv"));
  const auto info = nlohmann::json::parse(read_file(dir / "run_info.json"));
  return summary_json(m, info);
}

}  // namespace clforge
