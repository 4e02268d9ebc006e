#include "permflow/train.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <set>

#include <fmt/format.h>

#include "permflow/errors.hpp"
#include "permflow/log.hpp"
#include "permflow/optim.hpp"
#include "permflow/random.hpp"

namespace permflow {

std::string to_string(Setting s) {
  switch (s) {
    case Setting::kBaseline: return "baseline";
    case Setting::kMultitask: return "multitask";
    case Setting::kPretrain: return "pretrain";
    case Setting::kSelfSupOnly: return "selfsup_only";
  }
  return "unknown";
}

std::string to_string(DataScope s) {
  return s == DataScope::kCompleteDataset ? "complete_dataset" : "split_train";
}

Setting setting_from_string(const std::string& name) {
  if (name == "baseline") return Setting::kBaseline;
  if (name == "multitask") return Setting::kMultitask;
  if (name == "pretrain") return Setting::kPretrain;
  if (name == "selfsup_only") return Setting::kSelfSupOnly;
  throw ConfigError(fmt::format("unknown setting '{}' (baseline, multitask, pretrain, selfsup_only)", name));
}

DataScope scope_from_string(const std::string& name) {
  if (name == "split_train") return DataScope::kSplitTrain;
  if (name == "complete_dataset") return DataScope::kCompleteDataset;
  throw ConfigError(fmt::format("unknown dataset scope '{}' (split_train, complete_dataset)", name));
}

void TrainConfig::validate() const {
  const auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw ConfigError(fmt::format("{} must be positive", name));
  };
  positive(batch_size, "batch_size");
  positive(window, "window");
  positive(train_stride, "train_stride");
  positive(test_stride, "test_stride");
  positive(coupling_layers, "coupling_layers");
  positive(hidden_units, "hidden_units");
  if (setting != Setting::kBaseline) {
    if (permutations < 2) throw ConfigError("permutations (P) must be at least 2");
    if (pool_factor < 2) throw ConfigError("pool_factor must be at least 2");
  }
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be positive");
  if (!(min_delta >= 0.0)) throw ConfigError("min_delta must be >= 0");
  if (!(validation_fraction > 0.0 && validation_fraction < 1.0)) {
    throw ConfigError("validation_fraction must be in (0, 1)");
  }
  if (!(reduced_fraction > 0.0 && reduced_fraction <= 1.0)) throw ConfigError("reduced_fraction must be in (0, 1]");
  loss_config().validate();
}

LossConfig TrainConfig::loss_config() const {
  return LossConfig{physics_weight, lambda, penalty_samples};
}

FlowConfig flow_config(const TrainConfig& cfg, std::size_t input_dim) {
  FlowConfig fc;
  fc.input_dim = input_dim;
  fc.num_layers = cfg.coupling_layers;
  fc.hidden_units = cfg.hidden_units;
  return fc;
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"setting", to_string(c.setting)},
                     {"scope", to_string(c.scope)},
                     {"permutations", c.permutations},
                     {"pool_factor", c.pool_factor},
                     {"permutation_seed", c.permutation_seed},
                     {"epochs", c.epochs},
                     {"pretrain_epochs", c.pretrain_epochs},
                     {"batch_size", c.batch_size},
                     {"learning_rate", c.learning_rate},
                     {"patience", c.patience},
                     {"min_delta", c.min_delta},
                     {"seed", c.seed},
                     {"lambda", c.lambda},
                     {"physics_weight", c.physics_weight},
                     {"penalty_samples", c.penalty_samples},
                     {"alternate_batches", c.alternate_batches},
                     {"window", c.window},
                     {"train_stride", c.train_stride},
                     {"test_stride", c.test_stride},
                     {"validation_fraction", c.validation_fraction},
                     {"reduced_fraction", c.reduced_fraction},
                     {"coupling_layers", c.coupling_layers},
                     {"hidden_units", c.hidden_units}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  if (!j.is_object()) throw ConfigError("training config must be a JSON object");
  const nlohmann::json defaults = TrainConfig{};
  for (const auto& [key, value] : j.items()) {
    if (!defaults.contains(key)) throw ConfigError(fmt::format("unknown training config key '{}'", key));
  }
  try {
    c.setting = setting_from_string(j.value("setting", to_string(c.setting)));
    c.scope = scope_from_string(j.value("scope", to_string(c.scope)));
    c.permutations = j.value("permutations", c.permutations);
    c.pool_factor = j.value("pool_factor", c.pool_factor);
    c.permutation_seed = j.value("permutation_seed", c.permutation_seed);
    c.epochs = j.value("epochs", c.epochs);
    c.pretrain_epochs = j.value("pretrain_epochs", c.pretrain_epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.patience = j.value("patience", c.patience);
    c.min_delta = j.value("min_delta", c.min_delta);
    c.seed = j.value("seed", c.seed);
    c.lambda = j.value("lambda", c.lambda);
    c.physics_weight = j.value("physics_weight", c.physics_weight);
    c.penalty_samples = j.value("penalty_samples", c.penalty_samples);
    c.alternate_batches = j.value("alternate_batches", c.alternate_batches);
    c.window = j.value("window", c.window);
    c.train_stride = j.value("train_stride", c.train_stride);
    c.test_stride = j.value("test_stride", c.test_stride);
    c.validation_fraction = j.value("validation_fraction", c.validation_fraction);
    c.reduced_fraction = j.value("reduced_fraction", c.reduced_fraction);
    c.coupling_layers = j.value("coupling_layers", c.coupling_layers);
    c.hidden_units = j.value("hidden_units", c.hidden_units);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(fmt::format("training config: {}", e.what()));
  }
}

// ---- data preparation ---------------------------------------------------------------

namespace {

struct Holdout {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
};

Holdout holdout(std::size_t count, double fraction, Rng& rng) {
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(std::span<std::size_t>(order));
  auto n_val = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(count)));
  if (count >= 2) n_val = std::clamp<std::size_t>(n_val, 1, count - 1);
  else n_val = 0;
  Holdout h;
  h.validation.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  h.train.assign(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  std::sort(h.validation.begin(), h.validation.end());
  std::sort(h.train.begin(), h.train.end());
  return h;
}

}  // namespace

PreparedSplit prepare_split(const TelemetryTable& table, const Split& split, const TrainConfig& cfg,
                            std::uint64_t reduction_seed, const std::optional<LinearRelations>& raw_relations) {
  const std::set<std::string> test_set(split.test_files.begin(), split.test_files.end());
  for (const std::string& f : split.train_files) {
    if (test_set.contains(f)) throw ContractError(fmt::format("file '{}' is on both sides of the split", f));
  }
  if (split.test_files.empty()) throw ContractError("split has no test files");
  const auto known = table.sources();
  for (const auto* side : {&split.train_files, &split.test_files}) {
    for (const std::string& f : *side) {
      if (std::find(known.begin(), known.end(), f) == known.end()) {
        throw DataError(fmt::format("split references file '{}' that is not in the data", f));
      }
    }
  }

  PreparedSplit out;
  const auto train_rows = table.rows_of_sources(split.train_files);
  if (train_rows.empty()) throw ContractError("split has no training rows");
  out.scaler = Scaler::fit(table, train_rows);

  const TelemetryTable train_scaled = out.scaler.apply(table.select_sources(split.train_files));
  const TelemetryTable test_scaled = out.scaler.apply(table.select_sources(split.test_files));
  WindowedDataset all_train = make_windows(train_scaled, cfg.window, cfg.train_stride);
  out.test = make_windows(test_scaled, cfg.window, cfg.test_stride);
  out.test.role = Role::kTest;
  if (all_train.skipped_segments + out.test.skipped_segments > 0) {
    logging::warn("data", "skipped {} file segments shorter than {} rows",
              all_train.skipped_segments + out.test.skipped_segments, cfg.window);
  }

  Rng reduce_rng(derive_seed(reduction_seed, "reduce"));
  const auto kept = reduced_indices(all_train.size(), cfg.reduced_fraction, reduce_rng);
  const WindowedDataset reduced = all_train.subset(kept);

  Rng holdout_rng(derive_seed(reduction_seed, "holdout"));
  const Holdout reduced_split = holdout(reduced.size(), cfg.validation_fraction, holdout_rng);
  out.data.main_train = reduced.subset(reduced_split.train).with_label(RowLabel::kNominal);
  out.data.main_validation = reduced.subset(reduced_split.validation).with_label(RowLabel::kNominal);
  out.data.main_validation.role = Role::kValidation;

  if (cfg.scope == DataScope::kCompleteDataset) {
    Rng complete_rng(derive_seed(reduction_seed, "holdout.complete"));
    const Holdout complete_split = holdout(all_train.size(), cfg.validation_fraction, complete_rng);
    out.data.selfsup_train = all_train.subset(complete_split.train);
    out.data.selfsup_validation = all_train.subset(complete_split.validation);
  } else {
    out.data.selfsup_train = reduced.subset(reduced_split.train);
    out.data.selfsup_validation = reduced.subset(reduced_split.validation);
  }
  out.data.selfsup_validation.role = Role::kValidation;

  if (raw_relations) {
    const LinearRelations ordered = raw_relations->reordered(table.sensor_names());
    out.relations = ordered.rescaled(out.scaler.mins(), out.scaler.ranges());
  }
  return out;
}

// ---- training loops -------------------------------------------------------------------

namespace {

DenseArray gather(const WindowedDataset& ds, std::span<const std::size_t> rows) {
  const std::size_t d = ds.dim();
  std::vector<double> values;
  values.reserve(rows.size() * d);
  for (const std::size_t r : rows) {
    const auto w = ds.window(r);
    values.insert(values.end(), w.begin(), w.end());
  }
  return DenseArray({rows.size(), d}, std::move(values));
}

std::vector<std::size_t> iota_indices(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

void require_finite_loss(double loss, const std::string& phase, std::size_t epoch) {
  if (!std::isfinite(loss)) throw NumericError(fmt::format("non-finite {} loss at epoch {}", phase, epoch));
}

// Draws self-supervised examples by cycling through reshuffled passes over
// the pool, with a uniformly drawn permutation label per example.
class PermutedSampler {
 public:
  PermutedSampler(const WindowedDataset& pool, const PermutationSet& perms, Rng& rng)
      : pool_(pool), perms_(perms), rng_(rng) {}

  DenseArray next(std::size_t count, std::vector<std::size_t>& labels) {
    std::vector<std::size_t> rows(count);
    labels.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
      if (cursor_ == order_.size()) {
        order_ = iota_indices(pool_.size());
        rng_.shuffle(std::span<std::size_t>(order_));
        cursor_ = 0;
      }
      rows[i] = order_[cursor_++];
      labels[i] = rng_.uniform_index(perms_.size());
    }
    return permuted_batch(pool_.windows, rows, labels, perms_);
  }

 private:
  const WindowedDataset& pool_;
  const PermutationSet& perms_;
  Rng& rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

struct ValidationResult {
  double loss = 0.0;
  double accuracy = -1.0;
};

// Owns the model and the per-run random streams.
class Run {
 public:
  Run(const TrainConfig& cfg, const TrainingData& data, const PermutationSet* perms, PhysicsPenalty* penalty)
      : cfg_(cfg),
        data_(data),
        perms_(perms),
        penalty_(penalty),
        loss_cfg_(cfg.loss_config()),
        main_rng_(derive_seed(cfg.seed, "main.shuffle")),
        penalty_rng_(derive_seed(cfg.seed, "penalty")),
        selfsup_rng_(derive_seed(cfg.seed, "selfsup.batch")) {
    cfg_.validate();
    const std::size_t d = data.main_train.size() > 0 ? data.main_train.dim() : data.selfsup_train.dim();
    if (d == 0) throw ContractError("training data has no windows");
    result_.flow = FlowModel(flow_config(cfg, d), derive_seed(cfg.seed, "init.flow"));
    if (perms_ != nullptr) {
      if (perms_->sensors() != data.selfsup_train.sensors) {
        throw DimensionError(fmt::format("permutation set is over {} sensors, data has {}", perms_->sensors(),
                                         data.selfsup_train.sensors));
      }
      result_.head = SelfSupHead(d, perms_->size(), derive_seed(cfg.seed, "init.head"));
      Rng label_rng(derive_seed(cfg.seed, "selfsup.validation"));
      for (std::size_t i = 0; i < data.selfsup_validation.size(); ++i) {
        validation_labels_.push_back(label_rng.uniform_index(perms_->size()));
      }
    }
    if (penalty_ != nullptr && loss_cfg_.physics_weight > 0.0) {
      Rng draw_rng(derive_seed(cfg.seed, "penalty.validation"));
      validation_draws_ = DenseArray({loss_cfg_.penalty_samples, d});
      for (double& v : validation_draws_.values()) v = draw_rng.normal();
    }
  }

  TrainResult take() { return std::move(result_); }

  std::vector<Parameter*> flow_params() { return result_.flow.parameters(); }
  std::vector<Parameter*> flow_and_head_params() {
    auto p = result_.flow.parameters();
    for (Parameter* h : result_.head->parameters()) p.push_back(h);
    return p;
  }

  void require_main_data() const {
    if (data_.main_train.size() == 0) throw ContractError("no nominal training windows");
  }

  void require_selfsup_data() const {
    if (perms_ == nullptr) throw ContractError("a permutation set is required for this setting");
    if (data_.selfsup_train.size() == 0) throw ContractError("no windows for the self-supervised task");
    if (data_.selfsup_train.count(RowLabel::kFault) == 0) {
      logging::warn("train", "self-supervised pool has no fault windows; the task sees nominal data only");
    }
  }

  // Generic early-stopped phase. Returns the best validation loss.
  void phase(const std::string& name, std::size_t epochs, const std::vector<Parameter*>& params,
             const std::function<double(Adam&)>& epoch_fn, const std::function<ValidationResult()>& validate) {
    Adam adam(params, AdamConfig{cfg_.learning_rate});
    EarlyStopper stopper(cfg_.patience, cfg_.min_delta);
    ValidationResult v = validate();
    result_.history.push_back({name, 0, std::numeric_limits<double>::quiet_NaN(), v.loss, v.accuracy});
    stopper.observe(v.loss);
    std::vector<DenseArray> best = snapshot(params);
    std::size_t best_epoch = 0;
    for (std::size_t epoch = 1; epoch <= epochs; ++epoch) {
      const double train_loss = epoch_fn(adam);
      require_finite_loss(train_loss, name, epoch);
      v = validate();
      result_.history.push_back({name, epoch, train_loss, v.loss, v.accuracy});
      logging::debug("train", "{} epoch {} train {:.6f} validation {:.6f}", name, epoch, train_loss, v.loss);
      if (stopper.observe(v.loss)) {
        best = snapshot(params);
        best_epoch = epoch;
      }
      if (stopper.should_stop()) break;
    }
    restore(params, best);
    result_.best_validation = stopper.best();
    result_.best_epoch = best_epoch;
  }

  // One pass over the nominal training windows; with_selfsup adds the
  // permutation loss per batch (multi-task).
  double main_epoch(Adam& adam, bool with_selfsup, PermutedSampler* sampler) {
    auto order = iota_indices(data_.main_train.size());
    main_rng_.shuffle(std::span<std::size_t>(order));
    double total = 0.0;
    std::size_t batches = 0;
    std::vector<std::size_t> labels;
    for (std::size_t begin = 0; begin < order.size(); begin += cfg_.batch_size) {
      const std::size_t end = std::min(order.size(), begin + cfg_.batch_size);
      const std::span<const std::size_t> rows(order.data() + begin, end - begin);
      Tape tape;
      Var x = tape.constant(gather(data_.main_train, rows));
      Var loss;
      if (with_selfsup) {
        Var permuted = tape.constant(sampler->next(rows.size(), labels));
        if (cfg_.alternate_batches) {
          loss = batches % 2 == 0
                     ? main_loss(tape, result_.flow, x, penalty_, loss_cfg_, penalty_rng_)
                     : scale(selfsup_loss(tape, result_.flow, *result_.head, permuted, labels), loss_cfg_.selfsup_weight);
        } else {
          loss = multitask_loss(tape, result_.flow, *result_.head, x, permuted, labels, penalty_, loss_cfg_,
                                penalty_rng_);
        }
      } else {
        loss = main_loss(tape, result_.flow, x, penalty_, loss_cfg_, penalty_rng_);
      }
      adam.zero_grad();
      tape.backward(loss);
      adam.step();
      total += loss.value().item();
      ++batches;
    }
    return total / static_cast<double>(std::max<std::size_t>(batches, 1));
  }

  double selfsup_epoch(Adam& adam) {
    auto order = iota_indices(data_.selfsup_train.size());
    selfsup_rng_.shuffle(std::span<std::size_t>(order));
    double total = 0.0;
    std::size_t batches = 0;
    std::vector<std::size_t> labels;
    for (std::size_t begin = 0; begin < order.size(); begin += cfg_.batch_size) {
      const std::size_t end = std::min(order.size(), begin + cfg_.batch_size);
      const std::span<const std::size_t> rows(order.data() + begin, end - begin);
      labels.resize(rows.size());
      for (std::size_t& l : labels) l = selfsup_rng_.uniform_index(perms_->size());
      Tape tape;
      Var x = tape.constant(permuted_batch(data_.selfsup_train.windows, rows, labels, *perms_));
      Var loss = selfsup_loss(tape, result_.flow, *result_.head, x, labels);
      adam.zero_grad();
      tape.backward(loss);
      adam.step();
      total += loss.value().item();
      ++batches;
    }
    return total / static_cast<double>(std::max<std::size_t>(batches, 1));
  }

  double validation_nll() {
    const WindowedDataset& v = data_.main_validation.size() > 0 ? data_.main_validation : data_.main_train;
    double total = 0.0;
    const auto scores = result_.flow.log_prob(v.windows);
    for (const double lp : scores) total -= lp;
    double loss = total / static_cast<double>(scores.size());
    if (penalty_ != nullptr && loss_cfg_.physics_weight > 0.0) {
      Tape tape(false);
      Var generated = result_.flow.inverse(tape, tape.constant(validation_draws_));
      loss += loss_cfg_.physics_weight * penalty_->evaluate(tape, generated).value().item();
    }
    return loss;
  }

  ValidationResult validation_selfsup() {
    const WindowedDataset& v = data_.selfsup_validation.size() > 0 ? data_.selfsup_validation : data_.selfsup_train;
    std::vector<std::size_t> labels = validation_labels_;
    if (labels.size() != v.size()) {
      Rng label_rng(derive_seed(cfg_.seed, "selfsup.validation.fallback"));
      labels.resize(v.size());
      for (std::size_t& l : labels) l = label_rng.uniform_index(perms_->size());
    }
    const auto rows = iota_indices(v.size());
    const SelfSupEval e = evaluate_selfsup(result_.flow, *result_.head,
                                           permuted_batch(v.windows, rows, labels, *perms_), labels);
    return {e.loss, e.accuracy};
  }

  void warn_if_no_validation() const {
    if (data_.main_validation.size() == 0) {
      logging::warn("train", "no nominal validation windows; early stopping uses the training loss");
    }
  }

  const TrainConfig& cfg() const { return cfg_; }
  PermutedSampler sampler() { return PermutedSampler(data_.selfsup_train, *perms_, selfsup_rng_); }

 private:
  TrainConfig cfg_;
  const TrainingData& data_;
  const PermutationSet* perms_;
  PhysicsPenalty* penalty_;
  LossConfig loss_cfg_;
  Rng main_rng_;
  Rng penalty_rng_;
  Rng selfsup_rng_;
  std::vector<std::size_t> validation_labels_;
  DenseArray validation_draws_;
  TrainResult result_;
};

}  // namespace

TrainResult train_baseline(const TrainConfig& cfg, const TrainingData& data, PhysicsPenalty* penalty) {
  Run run(cfg, data, nullptr, penalty);
  run.require_main_data();
  run.warn_if_no_validation();
  run.phase("main", cfg.epochs, run.flow_params(),
            [&](Adam& adam) { return run.main_epoch(adam, false, nullptr); },
            [&] { return ValidationResult{run.validation_nll(), -1.0}; });
  return run.take();
}

TrainResult train_multitask(const TrainConfig& cfg, const TrainingData& data, const PermutationSet& perms,
                            PhysicsPenalty* penalty) {
  Run run(cfg, data, &perms, penalty);
  run.require_main_data();
  run.require_selfsup_data();
  run.warn_if_no_validation();
  const bool with_selfsup = cfg.lambda != 0.0;
  PermutedSampler sampler = run.sampler();
  run.phase("multitask", cfg.epochs, run.flow_and_head_params(),
            [&](Adam& adam) { return run.main_epoch(adam, with_selfsup, &sampler); },
            [&] {
              ValidationResult v{run.validation_nll(), -1.0};
              if (with_selfsup) {
                const ValidationResult s = run.validation_selfsup();
                v.loss += cfg.lambda * s.loss;
                v.accuracy = s.accuracy;
              }
              return v;
            });
  return run.take();
}

TrainResult train_pretrain_finetune(const TrainConfig& cfg, const TrainingData& data, const PermutationSet& perms,
                                    PhysicsPenalty* penalty) {
  Run run(cfg, data, &perms, penalty);
  run.require_main_data();
  run.require_selfsup_data();
  run.warn_if_no_validation();
  if (cfg.pretrain_epochs > 0) {
    run.phase("pretrain", cfg.pretrain_epochs, run.flow_and_head_params(),
              [&](Adam& adam) { return run.selfsup_epoch(adam); }, [&] { return run.validation_selfsup(); });
  }
  run.phase("finetune", cfg.epochs, run.flow_params(),
            [&](Adam& adam) { return run.main_epoch(adam, false, nullptr); },
            [&] { return ValidationResult{run.validation_nll(), -1.0}; });
  TrainResult result = run.take();
  result.head.reset();
  return result;
}

TrainResult train_selfsup_only(const TrainConfig& cfg, const TrainingData& data, const PermutationSet& perms) {
  Run run(cfg, data, &perms, nullptr);
  run.require_selfsup_data();
  run.phase("selfsup", cfg.epochs, run.flow_and_head_params(),
            [&](Adam& adam) { return run.selfsup_epoch(adam); }, [&] { return run.validation_selfsup(); });
  return run.take();
}

TrainResult train_model(const TrainConfig& cfg, const TrainingData& data, const PermutationSet* perms,
                        PhysicsPenalty* penalty) {
  if (cfg.setting != Setting::kBaseline && perms == nullptr) {
    throw ContractError(fmt::format("setting {} needs a permutation set", to_string(cfg.setting)));
  }
  switch (cfg.setting) {
    case Setting::kBaseline: return train_baseline(cfg, data, penalty);
    case Setting::kMultitask: return train_multitask(cfg, data, *perms, penalty);
    case Setting::kPretrain: return train_pretrain_finetune(cfg, data, *perms, penalty);
    case Setting::kSelfSupOnly: return train_selfsup_only(cfg, data, *perms);
  }
  throw ContractError("unknown setting");
}

}  // namespace permflow
