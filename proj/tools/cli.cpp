#include "cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "permflow/checkpoint.hpp"
#include "permflow/errors.hpp"
#include "permflow/experiment.hpp"
#include "permflow/log.hpp"
#include "permflow/manifest.hpp"
#include "permflow/metrics.hpp"
#include "permflow/selfsup.hpp"
#include "permflow/splits.hpp"
#include "permflow/synth.hpp"
#include "permflow/telemetry.hpp"
#include "permflow/train.hpp"

namespace permflow::cli {

namespace fs = std::filesystem;

namespace {

nlohmann::json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(fmt::format("cannot open {}", path.string()));
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(fmt::format("{}: {}", path.string(), e.what()));
  }
}

void write_json_file(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw DataError(fmt::format("cannot write {}", path.string()));
  out << j.dump(2) << '\n';
}

std::string joined(const std::vector<std::string>& args) {
  std::string s = "permflow";
  for (const auto& a : args) s += " " + a;
  return s;
}

// One string-valued flag per TrainConfig key, so the flag set always
// mirrors the config fields. Values are converted using the type of the
// default.
class TrainFlags {
 public:
  void add_to(CLI::App& app) {
    const nlohmann::json defaults = TrainConfig{};
    for (const auto& [key, value] : defaults.items()) {
      values_[key];
      app.add_option("--" + key, values_[key], fmt::format("TrainConfig.{} (default {})", key, value.dump()));
    }
  }

  // Applies every flag that was given on top of `base`.
  nlohmann::json apply(const CLI::App& app, nlohmann::json base) const {
    const nlohmann::json defaults = TrainConfig{};
    for (const auto& [key, text] : values_) {
      if (app.count("--" + key) == 0) continue;
      const auto& kind = defaults.at(key);
      try {
        if (kind.is_boolean()) {
          if (text == "true" || text == "1") base[key] = true;
          else if (text == "false" || text == "0") base[key] = false;
          else throw std::invalid_argument(text);
        } else if (kind.is_number_unsigned()) {
          if (text.starts_with('-')) throw std::invalid_argument(text);
          base[key] = std::stoull(text);
        } else if (kind.is_number()) {
          base[key] = std::stod(text);
        } else {
          base[key] = text;
        }
      } catch (const std::logic_error&) {
        throw ConfigError(fmt::format("--{}: invalid value '{}'", key, text));
      }
    }
    return base;
  }

 private:
  std::map<std::string, std::string> values_;
};

std::string arm_name(const TrainConfig& cfg) {
  if (cfg.setting == Setting::kBaseline) return "baseline";
  return to_string(cfg.setting) + (cfg.scope == DataScope::kCompleteDataset ? "_complete" : "");
}

// ---- synth ------------------------------------------------------------------------------

struct SynthArgs {
  std::string config;
  std::uint64_t seed = 0;
  std::optional<std::size_t> files;
  std::optional<std::size_t> rows;
  std::string out;
};

int cmd_synth(const SynthArgs& a, const std::string& command) {
  SynthConfig cfg;
  if (!a.config.empty()) {
    try {
      cfg = read_json_file(a.config).get<SynthConfig>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(fmt::format("{}: {}", a.config, e.what()));
    }
  }
  if (a.files) cfg.files = *a.files;
  if (a.rows) cfg.rows_per_file = *a.rows;
  cfg.validate();
  const fs::path out = a.out;
  fs::create_directories(out);
  Manifest manifest(command, cfg);
  manifest.set("seed", a.seed);
  if (!a.config.empty()) manifest.add_input("config", a.config);
  manifest.write(out / "manifest.json");

  const SynthResult r = synth_eps(cfg, a.seed);
  export_csv(out / "telemetry.csv", r.table, true);
  write_relations(out / "relations.txt", r.relations);
  nlohmann::json faults = nlohmann::json::array();
  for (const FaultSpec& f : r.faults) {
    faults.push_back({{"file", cfg.file_name(f.file)},
                      {"kind", to_string(f.kind)},
                      {"target", f.target},
                      {"start", f.start},
                      {"end", f.end},
                      {"magnitude", f.magnitude}});
  }
  write_json_file(out / "faults.json", faults);
  write_json_file(out / "synth.json", cfg);
  for (const char* name : {"telemetry.csv", "relations.txt", "faults.json", "synth.json"}) {
    manifest.add_output(name, out / name);
  }
  manifest.write(out / "manifest.json");
  logging::info("synth", "{} rows in {} files, {} faults -> {}", r.table.rows(), cfg.files, r.faults.size(),
                (out / "telemetry.csv").string());
  return kOk;
}

// ---- split ------------------------------------------------------------------------------

struct SplitArgs {
  std::string data;
  std::size_t k = 7;
  std::uint64_t seed = 0;
  std::size_t train_parts = 2;
  std::size_t test_parts = 1;
  std::string out;
};

int cmd_split(const SplitArgs& a, const std::string& command) {
  const fs::path out = a.out;
  fs::create_directories(out);
  Manifest manifest(command, {{"k", a.k}, {"seed", a.seed}, {"train_parts", a.train_parts}, {"test_parts", a.test_parts}});
  manifest.add_input("data", a.data);
  manifest.write(out / "split.manifest.json");

  const TelemetryTable table = ingest_csv(a.data);
  const SplitPlan plan = plan_splits(table.sources(), a.k, a.seed, a.train_parts, a.test_parts);
  save_split_plan(out / "splits.json", plan);
  manifest.add_output("splits", out / "splits.json");
  manifest.write(out / "split.manifest.json");
  logging::info("split", "{} splits over {} files -> {}", plan.splits.size(), table.sources().size(),
                (out / "splits.json").string());
  return kOk;
}

// ---- gen-perms --------------------------------------------------------------------------

struct PermArgs {
  std::size_t n = 0;
  std::size_t p = 0;
  std::size_t pool_factor = 10;
  std::uint64_t seed = 0;
  std::string out;
};

int cmd_gen_perms(const PermArgs& a, const std::string& command) {
  const fs::path out = a.out;
  fs::create_directories(out);
  const std::string stem = fmt::format("P{}", a.p);
  Manifest manifest(command, {{"n", a.n}, {"p", a.p}, {"pool_factor", a.pool_factor}, {"seed", a.seed}});
  manifest.write(out / (stem + ".manifest.json"));

  const PermutationSet set = generate_set(a.n, a.p, a.pool_factor, a.seed);
  write_permutation_set(out / (stem + ".txt"), set);
  manifest.set("score", set.score());
  manifest.add_output("perms", out / (stem + ".txt"));
  manifest.write(out / (stem + ".manifest.json"));
  logging::info("gen-perms", "n={} P={} D={} -> {}", a.n, a.p, set.score(), (out / (stem + ".txt")).string());
  return kOk;
}

// ---- train ------------------------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::string experiment;
  std::string manifest;
  std::string data;
  std::string splits;
  std::string perms;
  std::string relations;
  std::size_t split = 0;
  std::optional<std::size_t> jobs;
  std::string out;
};

int cmd_train(const TrainArgs& a, const TrainFlags& flags, const CLI::App& app, const std::string& command) {
  const fs::path out = a.out;

  if (!a.manifest.empty()) {
    const CellResult r = rerun_cell(a.manifest, out);
    std::cout << fmt::format("{} split {} seed {}: auroc {} fpr95 {} f1 {} ap {}\n", r.arm, r.split, r.seed,
                             r.metrics.auroc, r.metrics.fpr95, r.metrics.f1, r.metrics.average_precision);
    return kOk;
  }

  if (!a.experiment.empty()) {
    ExperimentConfig exp = load_experiment_config(a.experiment);
    exp.train = flags.apply(app, nlohmann::json(exp.train)).get<TrainConfig>();
    if (a.jobs) exp.jobs = *a.jobs;
    const ExperimentResult r = run_experiment(exp, out);
    std::cout << render_summary(r.summary);
    const auto failed = std::count_if(r.cells.begin(), r.cells.end(), [](const CellResult& c) { return !c.ok; });
    if (failed > 0) logging::warn("train", "{} of {} cells failed; see result.json files", failed, r.cells.size());
    return kOk;
  }

  if (a.data.empty() || a.splits.empty()) throw ConfigError("train needs --data and --splits (or --experiment)");
  nlohmann::json base = a.config.empty() ? nlohmann::json(TrainConfig{}) : read_json_file(a.config);
  TrainConfig cfg = flags.apply(app, base).get<TrainConfig>();
  cfg.validate();

  fs::create_directories(out);
  Manifest manifest(command, cfg);
  manifest.add_input("data", a.data);
  manifest.add_input("splits", a.splits);
  if (!a.perms.empty()) manifest.add_input("perms", a.perms);
  if (!a.relations.empty()) manifest.add_input("relations", a.relations);
  if (!a.config.empty()) manifest.add_input("config", a.config);
  manifest.write(out / "manifest.json");

  ExperimentConfig exp;
  exp.data = a.data;
  exp.splits = a.splits;
  exp.perms = a.perms;
  exp.relations = a.relations;
  exp.train = cfg;
  exp.arms = {arm_from_name(arm_name(cfg))};
  exp.split_indices = {a.split};
  exp.seeds = {cfg.seed};
  if (cfg.setting != Setting::kBaseline && a.perms.empty()) {
    throw ConfigError(fmt::format("--setting {} needs --perms", to_string(cfg.setting)));
  }
  const ExperimentInputs inputs = load_inputs(exp, out);
  const CellResult r = run_cell(inputs, cfg, {exp.arms.front(), a.split, cfg.seed}, out);
  write_report_csv(std::cout, {r});
  return kOk;
}

// ---- eval -------------------------------------------------------------------------------

struct EvalArgs {
  std::string run;
  std::string checkpoint;
  std::string out;
};

int cmd_eval(const EvalArgs& a, const std::string& command) {
  const fs::path run = a.run;
  const fs::path out = a.out.empty() ? run : fs::path(a.out);
  const fs::path ckpt = a.checkpoint.empty() ? run / "checkpoint.bin" : fs::path(a.checkpoint);
  fs::create_directories(out);

  const Manifest cell = Manifest::read(run / "manifest.json");
  Manifest manifest(command, {{"run", fs::absolute(run).string()}});
  manifest.add_input("checkpoint", ckpt);
  manifest.add_input("scaler", run / "scaler.json");
  manifest.add_input("cell_manifest", run / "manifest.json");
  manifest.write(out / "eval.manifest.json");

  TrainConfig cfg;
  CellSpec spec;
  try {
    cfg = cell.json().at("config").get<TrainConfig>();
    spec.arm = arm_from_name(cell.json().at("arm").get<std::string>());
    spec.split = cell.json().at("split").get<std::size_t>();
    spec.seed = cell.json().at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(fmt::format("{}: incomplete cell manifest: {}", (run / "manifest.json").string(), e.what()));
  }
  const TelemetryTable table = ingest_csv(cell.input("data"));
  const SplitPlan plan = load_split_plan(cell.input("splits"));
  if (spec.split >= plan.splits.size()) throw DataError("cell split index is not in the split plan");
  Scaler scaler;
  try {
    scaler = read_json_file(run / "scaler.json").get<Scaler>();
  } catch (const ConfigError& e) {
    throw DataError(e.what());
  }
  Checkpoint model = load_checkpoint(ckpt);
  const WindowedDataset test = test_windows(table, plan.splits[spec.split], scaler, cfg);

  CellResult r;
  r.arm = spec.arm.name;
  r.setting = to_string(cfg.setting);
  r.scope = to_string(cfg.scope);
  r.permutations = cfg.setting == Setting::kBaseline ? 0 : cfg.permutations;
  r.split = spec.split;
  r.seed = spec.seed;
  r.metrics = evaluate_scores(score_windows(model.flow, test));
  r.ok = true;
  r.test_windows = test.size();
  r.test_faults = test.count(RowLabel::kFault);

  write_json_file(out / "metrics.json", r.metrics);
  {
    std::ofstream csv(out / "eval.csv");
    write_report_csv(csv, {r});
  }
  write_report_csv(std::cout, {r});
  manifest.add_output("metrics", out / "metrics.json");
  manifest.add_output("eval", out / "eval.csv");
  manifest.write(out / "eval.manifest.json");
  return kOk;
}

// ---- report -----------------------------------------------------------------------------

struct ReportArgs {
  std::string results;
  std::string out;
};

int cmd_report(const ReportArgs& a, const std::string& command) {
  const fs::path out = a.out.empty() ? fs::path(a.results) : fs::path(a.out);
  fs::create_directories(out);
  Manifest manifest(command, {{"results", fs::absolute(a.results).string()}});
  manifest.write(out / "report.manifest.json");

  const auto cells = collect_results(a.results);
  const auto summary = summarize(cells);
  {
    std::ofstream csv(out / "report.csv");
    write_report_csv(csv, cells);
  }
  const std::string text = render_summary(summary);
  {
    std::ofstream txt(out / "summary.txt");
    txt << text;
  }
  nlohmann::json js = nlohmann::json::array();
  for (const ArmSummary& s : summary) {
    js.push_back({{"arm", s.arm},
                  {"setting", s.setting},
                  {"scope", s.scope},
                  {"permutations", s.permutations},
                  {"cells", s.cells},
                  {"failed", s.failed},
                  {"auroc", {{"mean", s.auroc.mean}, {"std", s.auroc.std}}},
                  {"fpr95", {{"mean", s.fpr95.mean}, {"std", s.fpr95.std}}},
                  {"f1", {{"mean", s.f1.mean}, {"std", s.f1.std}}},
                  {"average_precision", {{"mean", s.average_precision.mean}, {"std", s.average_precision.std}}}});
  }
  write_json_file(out / "summary.json", js);
  for (const char* name : {"report.csv", "summary.txt", "summary.json"}) manifest.add_output(name, out / name);
  manifest.write(out / "report.manifest.json");
  std::cout << text;
  return kOk;
}

int fail(int code, const std::string& message) {
  std::cerr << "permflow: error: " << message << '\n';
  return code;
}

}  // namespace

int run(const std::vector<std::string>& args) {
  CLI::App app{"Normalizing-flow fault detection with a permutation pretext task"};
  app.require_subcommand(1);
  std::string log_level = "info";
  app.add_option("--log-level", log_level, "debug, info, warn, error or off")
      ->check(CLI::IsMember({"debug", "info", "warn", "error", "off"}));

  SynthArgs synth_args;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic EPS telemetry corpus");
  synth->add_option("--config", synth_args.config, "SynthConfig JSON");
  synth->add_option("--seed", synth_args.seed);
  synth->add_option("--files", synth_args.files);
  synth->add_option("--rows", synth_args.rows, "Rows per file");
  synth->add_option("--out", synth_args.out)->required();

  SplitArgs split_args;
  auto* split = app.add_subcommand("split", "Plan train/test file splits");
  split->add_option("--data", split_args.data)->required();
  split->add_option("--k", split_args.k, "Number of splits");
  split->add_option("--seed", split_args.seed);
  split->add_option("--train-parts,--train_parts", split_args.train_parts);
  split->add_option("--test-parts,--test_parts", split_args.test_parts);
  split->add_option("--out", split_args.out)->required();

  PermArgs perm_args;
  auto* perms = app.add_subcommand("gen-perms", "Generate a permutation set");
  perms->add_option("--n", perm_args.n, "Sensors")->required();
  perms->add_option("--p", perm_args.p, "Set size P")->required();
  perms->add_option("--pool-factor,--pool_factor", perm_args.pool_factor);
  perms->add_option("--seed", perm_args.seed);
  perms->add_option("--out", perm_args.out)->default_val(".");

  TrainArgs train_args;
  TrainFlags train_flags;
  auto* train = app.add_subcommand("train", "Train one cell, an experiment matrix, or rerun a manifest");
  train->add_option("--config", train_args.config, "TrainConfig JSON; flags override it");
  train->add_option("--experiment", train_args.experiment, "Experiment matrix JSON");
  train->add_option("--manifest", train_args.manifest, "Rerun the cell recorded in a manifest");
  train->add_option("--data", train_args.data);
  train->add_option("--splits", train_args.splits);
  train->add_option("--split", train_args.split, "Split index");
  train->add_option("--perms", train_args.perms, "Permutation set file");
  train->add_option("--relations", train_args.relations, "Linear relations file for the physics penalty");
  train->add_option("--jobs", train_args.jobs, "Parallel cells");
  train->add_option("--out", train_args.out)->required();
  train_flags.add_to(*train);

  EvalArgs eval_args;
  auto* eval = app.add_subcommand("eval", "Score a trained cell's test windows");
  eval->add_option("--run", eval_args.run, "Cell directory")->required();
  eval->add_option("--checkpoint", eval_args.checkpoint);
  eval->add_option("--out", eval_args.out);

  ReportArgs report_args;
  auto* report = app.add_subcommand("report", "Summarize stored results");
  report->add_option("--results", report_args.results, "Experiment output directory")->required();
  report->add_option("--out", report_args.out);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    std::cout << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      std::cout << app.help();
      return kOk;
    }
    return fail(kConfigError, e.what());
  }

  static const std::map<std::string, logging::Level> levels{{"debug", logging::Level::kDebug},
                                                            {"info", logging::Level::kInfo},
                                                            {"warn", logging::Level::kWarn},
                                                            {"error", logging::Level::kError},
                                                            {"off", logging::Level::kOff}};
  logging::set_level(levels.at(log_level));
  const std::string command = joined(args);

  try {
    if (*synth) return cmd_synth(synth_args, command);
    if (*split) return cmd_split(split_args, command);
    if (*perms) return cmd_gen_perms(perm_args, command);
    if (*train) return cmd_train(train_args, train_flags, *train, command);
    if (*eval) return cmd_eval(eval_args, command);
    if (*report) return cmd_report(report_args, command);
  } catch (const ConfigError& e) {
    return fail(kConfigError, e.what());
  } catch (const NumericError& e) {
    return fail(kNumericError, e.what());
  } catch (const DataError& e) {
    return fail(kDataError, e.what());
  } catch (const UndefinedMetricError& e) {
    return fail(kDataError, e.what());
  } catch (const ContractError& e) {
    return fail(kDataError, e.what());
  } catch (const PoolError& e) {
    return fail(kConfigError, e.what());
  } catch (const fs::filesystem_error& e) {
    return fail(kDataError, e.what());
  } catch (const std::exception& e) {
    return fail(kConfigError, e.what());
  }
  return kConfigError;
}

}  // namespace permflow::cli
