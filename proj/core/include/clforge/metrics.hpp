#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace clforge {

inline constexpr int kReportSchemaVersion = 1;

// The one binarisation rule: foreground iff sigmoid(logit) > 0.5.
bool is_foreground(double logit);
std::vector<double> binarize(std::span<const double> logits);

// 2|P∩G| / (|P| + |G|) over binary masks; 1.0 when both are empty.
double dice(std::span<const double> pred_mask, std::span<const double> gt_mask);

// Test Dice after each training stage: R[s][i] for tasks i <= s.
class ResultsMatrix {
 public:
  ResultsMatrix() = default;
  explicit ResultsMatrix(std::vector<std::string> task_order) : task_order_(std::move(task_order)) {}

  // Appends stage s = stages(); requires exactly s + 1 values in [0, 1].
  void record_stage(std::vector<double> dice_per_task);

  std::size_t stages() const { return rows_.size(); }
  double at(std::size_t stage, std::size_t task) const;
  const std::vector<double>& row(std::size_t stage) const { return rows_.at(stage); }
  const std::vector<std::string>& task_order() const { return task_order_; }

  bool operator==(const ResultsMatrix&) const = default;

 private:
  std::vector<std::string> task_order_;
  std::vector<std::vector<double>> rows_;
};

double avg_dice(const ResultsMatrix& matrix, std::size_t stage);

struct ForgettingReport {
  // FR_i in percent for tasks 0..T-2; nullopt where the peak Dice is zero.
  std::vector<std::optional<double>> per_task;
  double average = 0.0;
  std::vector<std::string> warnings;
};

// Peak-based forgetting over post-task stages: FR_i = (peak_i - final_i) /
// peak_i * 100, peak_i = max_{s >= i} R[s][i]. The last task is excluded.
ForgettingReport forgetting_rate(const ResultsMatrix& matrix);

// metrics.csv ("stage,task,dice"), exact round-trip via %.17g.
std::string metrics_csv(const ResultsMatrix& matrix);
ResultsMatrix parse_metrics_csv(const std::string& text);

// summary.json derived from the matrix plus run-level facts (trainable
// counts, allocation decisions, wall clock) carried in `run_info`.
nlohmann::json summary_json(const ResultsMatrix& matrix, const nlohmann::json& run_info);

// Writes metrics.csv, run_info.json and summary.json into out_dir. Throws
// PreconditionError for an empty matrix before touching the filesystem.
void emit_report(const ResultsMatrix& matrix, const nlohmann::json& run_info, const std::filesystem::path& out_dir);

// Rebuilds summary.json from metrics.csv + run_info.json in `dir`.
nlohmann::json regenerate_summary(const std::filesystem::path& dir);

// Writes `content` via a temporary file and rename.
void write_file_atomic(const std::filesystem::path& path, const std::string& content);
std::string read_file(const std::filesystem::path& path);

}  // namespace clforge
