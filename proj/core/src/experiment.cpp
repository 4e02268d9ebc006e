#include "permflow/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <mutex>
#include <ostream>
#include <set>
#include <sstream>
#include <thread>
#include <tuple>

#include <fmt/format.h>

#include "permflow/checkpoint.hpp"
#include "permflow/errors.hpp"
#include "permflow/log.hpp"
#include "permflow/manifest.hpp"
#include "permflow/random.hpp"

namespace permflow {

namespace fs = std::filesystem;

std::vector<Arm> standard_arms() {
  std::vector<Arm> arms{{"baseline", Setting::kBaseline, DataScope::kSplitTrain}};
  for (const Setting s : {Setting::kMultitask, Setting::kPretrain, Setting::kSelfSupOnly}) {
    arms.push_back({to_string(s), s, DataScope::kSplitTrain});
    arms.push_back({to_string(s) + "_complete", s, DataScope::kCompleteDataset});
  }
  return arms;
}

Arm arm_from_name(const std::string& name) {
  for (const Arm& a : standard_arms()) {
    if (a.name == name) return a;
  }
  throw ConfigError(fmt::format("unknown arm '{}'", name));
}

void ExperimentConfig::validate() const {
  if (data.empty()) throw ConfigError("experiment: data path is required");
  if (splits.empty()) throw ConfigError("experiment: splits path is required");
  if (arms.empty()) throw ConfigError("experiment: no arms");
  if (seeds.empty()) throw ConfigError("experiment: no seeds");
  if (jobs == 0) throw ConfigError("experiment: jobs must be positive");
  std::set<std::string> names;
  for (const Arm& a : arms) {
    if (!names.insert(a.name).second) throw ConfigError(fmt::format("experiment: arm '{}' listed twice", a.name));
  }
  TrainConfig probe = train;
  probe.setting = Setting::kMultitask;
  probe.validate();
}

void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  std::vector<std::string> arms;
  for (const Arm& a : c.arms) arms.push_back(a.name);
  j = nlohmann::json{{"data", c.data.string()},
                     {"splits", c.splits.string()},
                     {"relations", c.relations.string()},
                     {"perms", c.perms.string()},
                     {"arms", arms},
                     {"split_indices", c.split_indices},
                     {"seeds", c.seeds},
                     {"train", c.train},
                     {"jobs", c.jobs}};
}

void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  static const std::set<std::string> keys{"data", "splits", "relations", "perms", "arms",
                                          "split_indices", "seeds", "train", "jobs"};
  if (!j.is_object()) throw ConfigError("experiment config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (!keys.contains(key)) throw ConfigError(fmt::format("unknown experiment config key '{}'", key));
  }
  try {
    c.data = j.value("data", c.data.string());
    c.splits = j.value("splits", c.splits.string());
    c.relations = j.value("relations", c.relations.string());
    c.perms = j.value("perms", c.perms.string());
    if (j.contains("arms")) {
      c.arms.clear();
      for (const auto& name : j["arms"]) c.arms.push_back(arm_from_name(name.get<std::string>()));
    }
    c.split_indices = j.value("split_indices", c.split_indices);
    c.seeds = j.value("seeds", c.seeds);
    if (j.contains("train")) c.train = j["train"].get<TrainConfig>();
    c.jobs = j.value("jobs", c.jobs);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(fmt::format("experiment config: {}", e.what()));
  }
}

ExperimentConfig load_experiment_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(fmt::format("cannot open experiment config {}", path.string()));
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(fmt::format("{}: {}", path.string(), e.what()));
  }
  ExperimentConfig cfg = j.get<ExperimentConfig>();
  const fs::path base = path.parent_path();
  for (fs::path* p : {&cfg.data, &cfg.splits, &cfg.relations, &cfg.perms}) {
    if (!p->empty() && p->is_relative()) *p = base / *p;
  }
  return cfg;
}

ExperimentInputs load_inputs(const ExperimentConfig& cfg, const fs::path& out) {
  ExperimentInputs in;
  in.data_path = cfg.data;
  in.splits_path = cfg.splits;
  in.table = ingest_csv(cfg.data);
  in.plan = load_split_plan(cfg.splits);
  if (!cfg.relations.empty()) {
    in.relations_path = cfg.relations;
    in.relations = read_relations(cfg.relations);
  }
  for (const std::size_t s : cfg.split_indices) {
    if (s >= in.plan.splits.size()) {
      throw ConfigError(fmt::format("split index {} out of range ({} splits)", s, in.plan.splits.size()));
    }
  }
  const bool need_perms = std::any_of(cfg.arms.begin(), cfg.arms.end(),
                                      [](const Arm& a) { return a.setting != Setting::kBaseline; });
  if (need_perms) {
    if (!cfg.perms.empty()) {
      in.perms_path = cfg.perms;
      in.perms = read_permutation_set(cfg.perms);
    } else {
      in.perms_path = out / "perms" / fmt::format("P{}.txt", cfg.train.permutations);
      if (fs::exists(in.perms_path)) {
        in.perms = read_permutation_set(in.perms_path);
      } else {
        in.perms = generate_set(in.table.sensors(), cfg.train.permutations, cfg.train.pool_factor,
                                cfg.train.permutation_seed);
        fs::create_directories(in.perms_path.parent_path());
        write_permutation_set(in.perms_path, *in.perms);
      }
    }
    if (in.perms->size() != cfg.train.permutations) {
      throw ConfigError(fmt::format("permutation set has P={} but the config asks for P={}", in.perms->size(),
                                    cfg.train.permutations));
    }
    if (in.perms->sensors() != in.table.sensors()) {
      throw ConfigError(fmt::format("permutation set is over {} sensors, data has {}", in.perms->sensors(),
                                    in.table.sensors()));
    }
  }
  return in;
}

void to_json(nlohmann::json& j, const CellResult& r) {
  j = nlohmann::json{{"arm", r.arm},
                     {"setting", r.setting},
                     {"scope", r.scope},
                     {"permutations", r.permutations},
                     {"split", r.split},
                     {"seed", r.seed},
                     {"ok", r.ok},
                     {"error", r.error},
                     {"metrics", r.metrics},
                     {"test_windows", r.test_windows},
                     {"test_faults", r.test_faults},
                     {"seconds", r.seconds}};
}

void from_json(const nlohmann::json& j, CellResult& r) {
  r.arm = j.at("arm").get<std::string>();
  r.setting = j.at("setting").get<std::string>();
  r.scope = j.at("scope").get<std::string>();
  r.permutations = j.at("permutations").get<std::size_t>();
  r.split = j.at("split").get<std::size_t>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.ok = j.at("ok").get<bool>();
  r.error = j.value("error", "");
  if (r.ok) r.metrics = j.at("metrics").get<MetricsReport>();
  r.test_windows = j.value("test_windows", std::size_t{0});
  r.test_faults = j.value("test_faults", std::size_t{0});
  r.seconds = j.value("seconds", 0.0);
}

std::uint64_t reduction_seed(const SplitPlan& plan, std::size_t split) {
  return derive_seed(derive_seed(plan.seed, "reduction"), static_cast<std::uint64_t>(split));
}

TrainConfig cell_config(const TrainConfig& base, const CellSpec& spec) {
  TrainConfig cfg = base;
  cfg.setting = spec.arm.setting;
  cfg.scope = spec.arm.scope;
  cfg.seed = spec.seed;
  return cfg;
}

fs::path cell_dir(const fs::path& out, const CellSpec& spec) {
  return out / spec.arm.name / std::to_string(spec.split) / std::to_string(spec.seed);
}

WindowedDataset test_windows(const TelemetryTable& table, const Split& split, const Scaler& scaler,
                             const TrainConfig& cfg) {
  WindowedDataset test = make_windows(scaler.apply(table.select_sources(split.test_files)), cfg.window,
                                      cfg.test_stride);
  test.role = Role::kTest;
  return test;
}

namespace {

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw DataError(fmt::format("cannot write {}", path.string()));
  out << j.dump(2) << '\n';
}

void write_history(const fs::path& path, const std::vector<EpochRecord>& history) {
  std::ofstream out(path);
  if (!out) throw DataError(fmt::format("cannot write {}", path.string()));
  out << "phase,epoch,train_loss,validation_loss,validation_accuracy\n";
  for (const EpochRecord& r : history) {
    out << fmt::format("{},{},{},{},{}\n", r.phase, r.epoch, r.train_loss, r.validation_loss, r.validation_accuracy);
  }
}

Manifest cell_manifest(const ExperimentInputs& inputs, const TrainConfig& cfg, const CellSpec& spec) {
  Manifest m("train-cell", cfg);
  m.set("arm", spec.arm.name);
  m.set("split", spec.split);
  m.set("seed", spec.seed);
  m.set("reduction_seed", reduction_seed(inputs.plan, spec.split));
  m.add_input("data", inputs.data_path);
  m.add_input("splits", inputs.splits_path);
  if (!inputs.relations_path.empty()) m.add_input("relations", inputs.relations_path);
  if (cfg.setting != Setting::kBaseline) m.add_input("perms", inputs.perms_path);
  return m;
}

CellResult blank_result(const CellSpec& spec, const TrainConfig& cfg) {
  CellResult r;
  r.arm = spec.arm.name;
  r.setting = to_string(spec.arm.setting);
  r.scope = to_string(spec.arm.scope);
  r.permutations = spec.arm.setting == Setting::kBaseline ? 0 : cfg.permutations;
  r.split = spec.split;
  r.seed = spec.seed;
  return r;
}

double sample_std(const std::vector<double>& v, double mean) {
  if (v.size() < 2) return 0.0;
  double ss = 0.0;
  for (const double x : v) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

MetricSummary summarize_values(const std::vector<double>& v) {
  MetricSummary s;
  if (v.empty()) return {std::nan(""), std::nan("")};
  double total = 0.0;
  for (const double x : v) total += x;
  s.mean = total / static_cast<double>(v.size());
  s.std = sample_std(v, s.mean);
  return s;
}

std::string display_setting(const std::string& setting) {
  if (setting == "baseline") return "Baseline";
  if (setting == "multitask") return "Multi-task";
  if (setting == "pretrain") return "Pre-Training";
  if (setting == "selfsup_only") return "Only self-supervision";
  return setting;
}

}  // namespace

CellResult run_cell(const ExperimentInputs& inputs, const TrainConfig& base, const CellSpec& spec,
                    const fs::path& dir) {
  const auto start = std::chrono::steady_clock::now();
  const TrainConfig cfg = cell_config(base, spec);
  cfg.validate();
  if (spec.split >= inputs.plan.splits.size()) {
    throw ConfigError(fmt::format("split index {} out of range ({} splits)", spec.split, inputs.plan.splits.size()));
  }
  if (cfg.setting != Setting::kBaseline && !inputs.perms) {
    throw ConfigError(fmt::format("arm {} needs a permutation set", spec.arm.name));
  }
  fs::create_directories(dir);
  Manifest manifest = cell_manifest(inputs, cfg, spec);
  manifest.write(dir / "manifest.json");

  const Split& split = inputs.plan.splits[spec.split];
  PreparedSplit prepared =
      prepare_split(inputs.table, split, cfg, reduction_seed(inputs.plan, spec.split), inputs.relations);
  std::optional<LinearRelationPenalty> penalty;
  if (prepared.relations && cfg.physics_weight > 0.0) penalty.emplace(*prepared.relations);

  TrainResult trained = train_model(cfg, prepared.data, inputs.perms ? &*inputs.perms : nullptr,
                                    penalty ? &*penalty : nullptr);

  save_checkpoint(dir / "checkpoint.bin", trained.flow, trained.head ? &*trained.head : nullptr);
  write_json(dir / "scaler.json", prepared.scaler);
  write_history(dir / "history.csv", trained.history);

  CellResult result = blank_result(spec, cfg);
  ScoringStats stats;
  const ScoreSet scores = score_windows(trained.flow, prepared.test, &stats);
  if (stats.out_of_range_windows > 0) {
    logging::debug("experiment", "{}: {} test windows fall outside the training range", dir.string(),
                   stats.out_of_range_windows);
  }
  result.test_windows = prepared.test.size();
  result.test_faults = prepared.test.count(RowLabel::kFault);
  result.metrics = evaluate_scores(scores);
  result.ok = true;
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  write_json(dir / "metrics.json", result.metrics);
  write_json(dir / "result.json", result);
  for (const char* name : {"checkpoint.bin", "scaler.json", "history.csv", "metrics.json"}) {
    manifest.add_output(fs::path(name).stem().string(), dir / name);
  }
  manifest.write(dir / "manifest.json");
  return result;
}

CellResult rerun_cell(const fs::path& manifest_path, const fs::path& dir) {
  const Manifest m = Manifest::read(manifest_path);
  const auto& doc = m.json();
  TrainConfig cfg;
  CellSpec spec;
  try {
    cfg = doc.at("config").get<TrainConfig>();
    spec.arm = arm_from_name(doc.at("arm").get<std::string>());
    spec.split = doc.at("split").get<std::size_t>();
    spec.seed = doc.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(fmt::format("{}: incomplete cell manifest: {}", manifest_path.string(), e.what()));
  }
  ExperimentInputs inputs;
  inputs.data_path = m.input("data");
  inputs.splits_path = m.input("splits");
  inputs.table = ingest_csv(inputs.data_path);
  inputs.plan = load_split_plan(inputs.splits_path);
  if (m.has_input("relations")) {
    inputs.relations_path = m.input("relations");
    inputs.relations = read_relations(inputs.relations_path);
  }
  if (m.has_input("perms")) {
    inputs.perms_path = m.input("perms");
    inputs.perms = read_permutation_set(inputs.perms_path);
  }
  return run_cell(inputs, cfg, spec, dir);
}

ExperimentResult run_experiment(const ExperimentConfig& cfg, const fs::path& out) {
  cfg.validate();
  fs::create_directories(out);
  Manifest manifest("train-experiment", cfg);
  manifest.add_input("data", cfg.data);
  manifest.add_input("splits", cfg.splits);
  if (!cfg.relations.empty()) manifest.add_input("relations", cfg.relations);
  if (!cfg.perms.empty()) manifest.add_input("perms", cfg.perms);
  manifest.write(out / "manifest.json");

  const ExperimentInputs inputs = load_inputs(cfg, out);
  std::vector<std::size_t> split_ids = cfg.split_indices;
  if (split_ids.empty()) {
    for (std::size_t s = 0; s < inputs.plan.splits.size(); ++s) split_ids.push_back(s);
  }
  std::vector<CellSpec> cells;
  for (const Arm& arm : cfg.arms) {
    for (const std::size_t s : split_ids) {
      for (const std::uint64_t seed : cfg.seeds) cells.push_back({arm, s, seed});
    }
  }

  ExperimentResult result;
  result.cells.resize(cells.size());
  std::atomic<std::size_t> next{0};
  std::atomic<std::size_t> done{0};
  const auto worker = [&] {
    for (std::size_t i = next++; i < cells.size(); i = next++) {
      const CellSpec& spec = cells[i];
      const fs::path dir = cell_dir(out, spec);
      try {
        result.cells[i] = run_cell(inputs, cfg.train, spec, dir);
      } catch (const std::exception& e) {
        CellResult failed = blank_result(spec, cell_config(cfg.train, spec));
        failed.error = e.what();
        logging::warn("experiment", "cell {}/{}/{} failed: {}", spec.arm.name, spec.split, spec.seed, e.what());
        try {
          fs::create_directories(dir);
          write_json(dir / "result.json", failed);
        } catch (const std::exception&) {
        }
        result.cells[i] = std::move(failed);
      }
      const CellResult& r = result.cells[i];
      logging::info("experiment", "[{}/{}] {} split {} seed {}: {}", ++done, cells.size(), spec.arm.name, spec.split,
                    spec.seed, r.ok ? fmt::format("auroc {:.4f} ({:.1f}s)", r.metrics.auroc, r.seconds) : "failed");
    }
  };
  const std::size_t jobs = std::min(cfg.jobs, std::max<std::size_t>(cells.size(), 1));
  if (jobs <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t j = 0; j < jobs; ++j) pool.emplace_back(worker);
  }

  result.summary = summarize(result.cells);
  {
    std::ofstream csv(out / "report.csv");
    write_report_csv(csv, result.cells);
  }
  {
    std::ofstream txt(out / "summary.txt");
    txt << render_summary(result.summary);
  }
  return result;
}

std::vector<ArmSummary> summarize(const std::vector<CellResult>& cells) {
  std::vector<ArmSummary> out;
  std::vector<std::vector<double>> auroc, fpr, f1, ap;
  for (const CellResult& c : cells) {
    auto it = std::find_if(out.begin(), out.end(), [&](const ArmSummary& s) { return s.arm == c.arm; });
    if (it == out.end()) {
      out.push_back({c.arm, c.setting, c.scope, c.permutations, 0, 0, {}, {}, {}, {}});
      auroc.emplace_back();
      fpr.emplace_back();
      f1.emplace_back();
      ap.emplace_back();
      it = out.end() - 1;
    }
    const auto k = static_cast<std::size_t>(it - out.begin());
    if (!c.ok) {
      ++it->failed;
      continue;
    }
    ++it->cells;
    auroc[k].push_back(c.metrics.auroc);
    fpr[k].push_back(c.metrics.fpr95);
    f1[k].push_back(c.metrics.f1);
    ap[k].push_back(c.metrics.average_precision);
  }
  for (std::size_t k = 0; k < out.size(); ++k) {
    out[k].auroc = summarize_values(auroc[k]);
    out[k].fpr95 = summarize_values(fpr[k]);
    out[k].f1 = summarize_values(f1[k]);
    out[k].average_precision = summarize_values(ap[k]);
  }
  return out;
}

void write_report_csv(std::ostream& out, const std::vector<CellResult>& cells) {
  out << "arm,setting,scope,permutations,split,seed,ok,auroc,fpr95,f1,average_precision,threshold,test_windows,"
         "test_faults,error\n";
  for (const CellResult& c : cells) {
    std::string error = c.error;
    std::replace(error.begin(), error.end(), '"', '\'');
    if (c.ok) {
      out << fmt::format("{},{},{},{},{},{},1,{},{},{},{},{},{},{},\n", c.arm, c.setting, c.scope, c.permutations,
                         c.split, c.seed, c.metrics.auroc, c.metrics.fpr95, c.metrics.f1, c.metrics.average_precision,
                         c.metrics.threshold, c.test_windows, c.test_faults);
    } else {
      out << fmt::format("{},{},{},{},{},{},0,,,,,,,,\"{}\"\n", c.arm, c.setting, c.scope, c.permutations, c.split,
                         c.seed, error);
    }
  }
}

std::string render_summary(const std::vector<ArmSummary>& summary) {
  const auto pct = [](const MetricSummary& m) {
    if (std::isnan(m.mean)) return std::string("n/a");
    return fmt::format("{:.2f} ± {:.2f}", 100.0 * m.mean, 100.0 * m.std);
  };
  std::ostringstream out;
  out << fmt::format("{:<23} {:<17} {:>7}  {:<15} {:<15} {:<15} {:<15} {}\n", "Setting", "Configuration", "# Perms",
                     "AUROC", "FPR95", "F1", "Avg. Prec.", "cells");
  for (const ArmSummary& s : summary) {
    const std::string config = s.setting == "baseline" ? "-"
                               : s.scope == "complete_dataset" ? "complete dataset"
                                                               : "split train";
    const std::string perms = s.permutations == 0 ? "-" : std::to_string(s.permutations);
    std::string cells = std::to_string(s.cells);
    if (s.failed > 0) cells += fmt::format(" ({} failed)", s.failed);
    // "±" is two bytes in UTF-8, so the metric columns are padded by hand.
    const auto col = [](const std::string& v) { return v + std::string(v.size() < 16 ? 16 - v.size() : 1, ' '); };
    out << fmt::format("{:<23} {:<17} {:>7}  {}{}{}{}{}\n", display_setting(s.setting), config, perms,
                       col(pct(s.auroc)), col(pct(s.fpr95)), col(pct(s.f1)), col(pct(s.average_precision)), cells);
  }
  return out.str();
}

std::vector<CellResult> collect_results(const fs::path& out) {
  if (!fs::is_directory(out)) throw DataError(fmt::format("{} is not a directory", out.string()));
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(out)) {
    if (entry.is_regular_file() && entry.path().filename() == "result.json") files.push_back(entry.path());
  }
  std::vector<CellResult> results;
  for (const fs::path& f : files) {
    std::ifstream in(f);
    try {
      results.push_back(nlohmann::json::parse(in).get<CellResult>());
    } catch (const nlohmann::json::exception& e) {
      throw DataError(fmt::format("{}: malformed result: {}", f.string(), e.what()));
    }
  }
  // Arm order follows the standard table, then split and seed.
  const auto arms = standard_arms();
  const auto rank = [&](const std::string& name) {
    const auto it = std::find_if(arms.begin(), arms.end(), [&](const Arm& a) { return a.name == name; });
    return static_cast<std::size_t>(it - arms.begin());
  };
  std::sort(results.begin(), results.end(), [&](const CellResult& a, const CellResult& b) {
    return std::tuple(rank(a.arm), a.arm, a.split, a.seed) < std::tuple(rank(b.arm), b.arm, b.split, b.seed);
  });
  if (results.empty()) throw DataError(fmt::format("no results under {}", out.string()));
  return results;
}

}  // namespace permflow
