#pragma once

// The settings x splits x seeds experiment matrix, per-cell artifacts and the
// aggregated summary.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "permflow/losses.hpp"
#include "permflow/metrics.hpp"
#include "permflow/selfsup.hpp"
#include "permflow/splits.hpp"
#include "permflow/telemetry.hpp"
#include "permflow/train.hpp"

namespace permflow {

// One row of the results table: a setting together with its data scope.
struct Arm {
  std::string name;
  Setting setting = Setting::kBaseline;
  DataScope scope = DataScope::kSplitTrain;
};

// baseline, then multitask / pretrain / selfsup_only each with split_train
// and complete_dataset scope (the latter suffixed "_complete").
std::vector<Arm> standard_arms();
Arm arm_from_name(const std::string& name);

struct ExperimentConfig {
  std::filesystem::path data;       // telemetry CSV
  std::filesystem::path splits;     // split plan JSON
  std::filesystem::path relations;  // empty: no physics penalty
  std::filesystem::path perms;      // empty: generated into <out>/perms/
  std::vector<Arm> arms = standard_arms();
  std::vector<std::size_t> split_indices;  // empty: every split in the plan
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  TrainConfig train;
  std::size_t jobs = 1;

  void validate() const;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);
// Relative paths in the file resolve against the file's directory.
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

struct ExperimentInputs {
  TelemetryTable table;
  SplitPlan plan;
  std::optional<PermutationSet> perms;
  std::optional<LinearRelations> relations;
  std::filesystem::path data_path;
  std::filesystem::path splits_path;
  std::filesystem::path perms_path;
  std::filesystem::path relations_path;
};

// Loads data, plan and relations. A permutation set is loaded from `perms`
// or generated (and cached under <out>/perms/) when any arm needs one.
ExperimentInputs load_inputs(const ExperimentConfig& cfg, const std::filesystem::path& out);

struct CellSpec {
  Arm arm;
  std::size_t split = 0;
  std::uint64_t seed = 0;
};

struct CellResult {
  std::string arm;
  std::string setting;
  std::string scope;
  std::size_t permutations = 0;
  std::size_t split = 0;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  MetricsReport metrics;
  std::size_t test_windows = 0;
  std::size_t test_faults = 0;
  double seconds = 0.0;
};

void to_json(nlohmann::json& j, const CellResult& r);
void from_json(const nlohmann::json& j, CellResult& r);

// Shared by every arm and seed of a split, so they all see the same
// reduced training windows.
std::uint64_t reduction_seed(const SplitPlan& plan, std::size_t split);
TrainConfig cell_config(const TrainConfig& base, const CellSpec& spec);
std::filesystem::path cell_dir(const std::filesystem::path& out, const CellSpec& spec);

WindowedDataset test_windows(const TelemetryTable& table, const Split& split, const Scaler& scaler,
                             const TrainConfig& cfg);

// Trains and evaluates one cell into `dir`: manifest.json first, then
// checkpoint.bin, scaler.json, history.csv, metrics.json and result.json.
CellResult run_cell(const ExperimentInputs& inputs, const TrainConfig& base, const CellSpec& spec,
                    const std::filesystem::path& dir);

// Re-runs the cell recorded in a manifest, verifying input hashes first.
CellResult rerun_cell(const std::filesystem::path& manifest, const std::filesystem::path& dir);

struct MetricSummary {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation, 0 for a single cell
};

struct ArmSummary {
  std::string arm;
  std::string setting;
  std::string scope;
  std::size_t permutations = 0;
  std::size_t cells = 0;
  std::size_t failed = 0;
  MetricSummary auroc;
  MetricSummary fpr95;
  MetricSummary f1;
  MetricSummary average_precision;
};

struct ExperimentResult {
  std::vector<CellResult> cells;
  std::vector<ArmSummary> summary;
};

// Failed cells are logged, recorded with ok=false and excluded from the
// summary; they never abort the matrix.
ExperimentResult run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& out);

std::vector<ArmSummary> summarize(const std::vector<CellResult>& cells);
void write_report_csv(std::ostream& out, const std::vector<CellResult>& cells);
// Percentages, mean ± std over splits and seeds, one line per arm.
std::string render_summary(const std::vector<ArmSummary>& summary);
// Reads every <out>/<arm>/<split>/<seed>/result.json.
std::vector<CellResult> collect_results(const std::filesystem::path& out);

}  // namespace permflow
