#pragma once

// Training loops for the baseline and the three permutation-task settings.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "permflow/flow.hpp"
#include "permflow/losses.hpp"
#include "permflow/selfsup.hpp"
#include "permflow/splits.hpp"
#include "permflow/telemetry.hpp"

namespace permflow {

enum class Setting { kBaseline, kMultitask, kPretrain, kSelfSupOnly };
enum class DataScope { kSplitTrain, kCompleteDataset };

std::string to_string(Setting s);
std::string to_string(DataScope s);
Setting setting_from_string(const std::string& name);
DataScope scope_from_string(const std::string& name);

struct TrainConfig {
  Setting setting = Setting::kBaseline;
  DataScope scope = DataScope::kSplitTrain;
  std::size_t permutations = 200;  // P
  std::size_t pool_factor = 10;
  std::uint64_t permutation_seed = 1;
  std::size_t epochs = 100;
  std::size_t pretrain_epochs = 100;
  std::size_t batch_size = 256;
  double learning_rate = 1e-3;
  std::size_t patience = 20;
  double min_delta = 1e-4;
  std::uint64_t seed = 0;
  double lambda = 1.0;
  double physics_weight = 1.0;
  std::size_t penalty_samples = 32;
  // Multi-task: sum both losses per batch, or alternate batches.
  bool alternate_batches = false;

  // Data preparation.
  std::size_t window = 50;
  std::size_t train_stride = 50;
  std::size_t test_stride = 1;
  double validation_fraction = 0.3;
  double reduced_fraction = 0.34;

  // Architecture.
  std::size_t coupling_layers = 4;
  std::size_t hidden_units = 32;

  void validate() const;
  LossConfig loss_config() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
// Missing keys keep their defaults; unknown keys are a ConfigError.
void from_json(const nlohmann::json& j, TrainConfig& c);

struct TrainingData {
  WindowedDataset main_train;           // nominal windows only
  WindowedDataset main_validation;      // nominal windows only
  WindowedDataset selfsup_train;        // nominal and fault windows
  WindowedDataset selfsup_validation;
};

struct PreparedSplit {
  Scaler scaler;
  TrainingData data;
  WindowedDataset test;
  std::optional<LinearRelations> relations;  // on scaled columns
};

// Scales with a scaler fitted on the split's training files, windows every
// side, keeps `reduced_fraction` of the training windows for the main loss
// (and for the self-supervised task unless scope is complete_dataset), and
// holds out `validation_fraction` of each pool for early stopping.
// `reduction_seed` fixes which windows survive the reduction.
PreparedSplit prepare_split(const TelemetryTable& table, const Split& split, const TrainConfig& cfg,
                            std::uint64_t reduction_seed,
                            const std::optional<LinearRelations>& raw_relations = std::nullopt);

struct EpochRecord {
  std::string phase;
  std::size_t epoch = 0;  // 0 = before any update
  double train_loss = 0.0;
  double validation_loss = 0.0;
  double validation_accuracy = -1.0;  // permutation accuracy when a head is trained
};

struct TrainResult {
  FlowModel flow;
  std::optional<SelfSupHead> head;
  std::vector<EpochRecord> history;
  double best_validation = 0.0;
  std::size_t best_epoch = 0;
};

TrainResult train_baseline(const TrainConfig& cfg, const TrainingData& data, PhysicsPenalty* penalty);
TrainResult train_multitask(const TrainConfig& cfg, const TrainingData& data, const PermutationSet& perms,
                            PhysicsPenalty* penalty);
TrainResult train_pretrain_finetune(const TrainConfig& cfg, const TrainingData& data,
                                    const PermutationSet& perms, PhysicsPenalty* penalty);
TrainResult train_selfsup_only(const TrainConfig& cfg, const TrainingData& data, const PermutationSet& perms);

// Dispatches on cfg.setting; perms may be null for the baseline.
TrainResult train_model(const TrainConfig& cfg, const TrainingData& data, const PermutationSet* perms,
                        PhysicsPenalty* penalty);

FlowConfig flow_config(const TrainConfig& cfg, std::size_t input_dim);

}  // namespace permflow
