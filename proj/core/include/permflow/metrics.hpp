#pragma once

// Threshold-free and threshold-based detection metrics over per-window
// anomaly scores. Positives are fault windows; higher scores are more
// anomalous. A window is flagged when its score is >= the threshold.

#include <cstddef>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "permflow/flow.hpp"
#include "permflow/telemetry.hpp"

namespace permflow {

struct ScoreSet {
  std::vector<double> scores;
  std::vector<bool> positive;

  std::size_t size() const noexcept { return scores.size(); }
  std::size_t positives() const;
  std::size_t negatives() const { return size() - positives(); }
};

struct Confusion {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
};

struct F1Result {
  double f1 = 0.0;
  double threshold = 0.0;
  Confusion counts;
};

struct MetricsReport {
  double auroc = 0.0;
  double fpr95 = 0.0;
  double f1 = 0.0;
  double average_precision = 0.0;
  double threshold = 0.0;
  Confusion counts;
};

void to_json(nlohmann::json& j, const MetricsReport& r);
void from_json(const nlohmann::json& j, MetricsReport& r);

// All four throw UndefinedMetricError unless both classes are present.
double auroc(const ScoreSet& s);
double fpr95(const ScoreSet& s);
F1Result best_f1(const ScoreSet& s);
double average_precision(const ScoreSet& s);
MetricsReport evaluate_scores(const ScoreSet& s);

struct ScoringStats {
  std::size_t out_of_range_windows = 0;  // values outside [-1, 2]: likely unscaled
};

// score = -log p(window) under the flow; no head is involved.
ScoreSet score_windows(FlowModel& model, const WindowedDataset& data, ScoringStats* stats = nullptr,
                       std::size_t batch = 512);

}  // namespace permflow
