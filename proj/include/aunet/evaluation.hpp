#pragma once

// Held-out evaluation of checkpoints and the fold-averaged ablation report.

#include "aunet/checkpoint.hpp"
#include "aunet/data.hpp"
#include "aunet/loss_metrics.hpp"

#include <json.hpp>

#include <optional>
#include <string>
#include <vector>

namespace aunet {

struct EvalResult {
  std::string mode;
  int fold = 0;
  double threshold = 0.5;
  std::vector<int> aus;
  std::vector<std::size_t> frames;  // evaluated dataset frames, row order of probs/labels
  ProbMatrix probs;
  LabelMatrix labels;
  F1Scores f1;
};

// Per-frame probabilities for `frames` in the given order. Temporal
// networks score every frame of each touched session through the windows
// named by the run's temporal_eval setting and return the requested rows.
ProbMatrix predict_frames(const Checkpoint& ckpt, const Dataset& data, const std::vector<std::size_t>& frames);

// Evaluates the held-out fold (the checkpoint's own fold when `fold` is
// empty). Fold -1 evaluates every frame.
EvalResult evaluate(const Checkpoint& ckpt, const Dataset& data, std::optional<int> fold = std::nullopt,
                    double threshold = 0.5);

// Machine-readable metrics; F1 values are percentages.
nlohmann::json metrics_json(const EvalResult& r);

// Per-AU table with one row per AU plus an average row.
std::string metrics_table(const EvalResult& r);

struct RunMetrics {
  std::string mode;
  int fold = 0;
  std::vector<int> aus;
  std::vector<double> f1;  // percentages, aligned with aus
  double average = 0;
};

RunMetrics run_metrics_from_json(const nlohmann::json& j);

struct ModeSummary {
  std::string mode;
  int runs = 0;
  std::vector<int> aus;
  std::vector<double> f1;  // unweighted mean over runs
  double average = 0;
};

// Groups runs by mode and averages them; modes appear in ablation order.
std::vector<ModeSummary> summarize_runs(const std::vector<RunMetrics>& runs);

// Published F1 numbers used as a reference column.
struct LiteratureColumn {
  std::string dataset;
  std::string method;
  std::vector<int> aus;
  std::vector<double> f1;
  double average = 0;
};
const std::vector<LiteratureColumn>& literature_reference();

// Ablation table: AU rows, one column per mode, then the literature columns
// for the same dataset's AU set.
std::string render_report(const std::vector<ModeSummary>& summaries);

// Collects every metrics.json below `runs_dir`, sorted by path.
std::vector<RunMetrics> collect_runs(const std::string& runs_dir);

}  // namespace aunet
