// Acceptance runner: one PASS/FAIL line per criterion, exit status 1 when any
// criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "permflow/experiment.hpp"
#include "permflow/log.hpp"
#include "permflow/losses.hpp"
#include "permflow/metrics.hpp"
#include "permflow/optim.hpp"
#include "permflow/random.hpp"
#include "permflow/selfsup.hpp"
#include "permflow/splits.hpp"
#include "permflow/synth.hpp"
#include "permflow/train.hpp"

using namespace permflow;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

DenseArray uniform_rows(std::size_t rows, std::size_t d, Rng& rng, double half) {
  DenseArray x({rows, d});
  for (double& v : x.values()) v = rng.uniform(-half, half);
  return x;
}

FlowConfig random_flow(std::size_t d, std::size_t layers) {
  FlowConfig cfg;
  cfg.input_dim = d;
  cfg.num_layers = layers;
  cfg.hidden_units = 6;
  cfg.zero_init_output = false;
  return cfg;
}

// Worst relative error between backprop and central differences for a
// scalar built over `params`.
double gradient_error(std::span<Parameter* const> params, const std::function<Var(Tape&)>& build) {
  for (Parameter* p : params) p->zero_grad();
  Tape tape;
  tape.backward(build(tape));
  const auto value = [&] {
    Tape t(false);
    return build(t).value().item();
  };
  double worst = 0.0;
  for (Parameter* p : params) {
    const auto numeric = oracle::numeric_gradient(value, p->value.values());
    worst = std::max(worst, oracle::max_relative_error(p->grad.values(), numeric));
  }
  return worst;
}

Outcome flow_correctness() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(7);
  double roundtrip = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t d = 2 + rng.uniform_index(9);
    FlowModel model(random_flow(d, 1), 1000 + static_cast<std::uint64_t>(trial));
    const DenseArray x = uniform_rows(1, d, rng, 3.0);
    Tape tape(false);
    auto& layer = model.layers()[0];
    const DenseArray back = layer.inverse(tape, layer.forward(tape, tape.constant(x)).y).value();
    for (std::size_t i = 0; i < d; ++i) roundtrip = std::max(roundtrip, std::abs(back[i] - x[i]));
  }

  double logdet = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t d = 2 + rng.uniform_index(5);
    FlowModel model(random_flow(d, 1), 5000 + static_cast<std::uint64_t>(trial));
    auto& layer = model.layers()[0];
    const DenseArray x = uniform_rows(1, d, rng, 1.5);
    Tape tape(false);
    const double ld = layer.forward(tape, tape.constant(x)).log_det.value()[0];
    const std::vector<double> xv(x.values().begin(), x.values().end());
    logdet = std::max(logdet, std::abs(ld - oracle::jacobian_log_det(layer, xv)));
  }

  DenseArray data({512, 2});
  for (std::size_t i = 0; i < 512; ++i) {
    const double a = rng.uniform(0.0, std::numbers::pi);
    const bool upper = i % 2 == 0;
    data.at(i, 0) = upper ? std::cos(a) : 1.0 - std::cos(a);
    data.at(i, 1) = (upper ? std::sin(a) : 0.5 - std::sin(a)) + 0.1 * rng.normal();
  }
  FlowModel moons(FlowConfig{.input_dim = 2, .num_layers = 4, .hidden_units = 16}, 3);
  Adam adam(moons.parameters(), AdamConfig{1e-2});
  for (int step = 0; step < 300; ++step) {
    Tape tape;
    Var loss = neg(mean(moons.log_prob(tape, tape.constant(data))));
    adam.zero_grad();
    tape.backward(loss);
    adam.step();
  }
  const double integral = oracle::integrate_density_2d(moons, 9.0, 600);
  const double secs = seconds_since(t0);
  return {roundtrip < 1e-9 && logdet < 1e-4 && std::abs(integral - 1.0) < 1e-2 && secs < 120.0,
          fmt::format("round trip {:.2e} (<1e-9, 1000 pairs), log-det {:.2e} (<1e-4, d<=6), integral {:.5f} "
                      "(1+-1e-2), {:.1f} s (<120 s)",
                      roundtrip, logdet, integral, secs)};
}

Outcome gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(42);
  double worst = 0.0;
  std::string worst_name;
  const auto note = [&](const std::string& name, double err) {
    if (err >= worst) {
      worst = err;
      worst_name = name;
    }
  };
  const auto random_param = [&](const char* name, Shape shape) {
    DenseArray a(std::move(shape));
    for (double& v : a.values()) v = rng.uniform(-1.0, 1.0);
    return Parameter(name, std::move(a));
  };

  for (int trial = 0; trial < 5; ++trial) {
    std::vector<Parameter> store{random_param("a", {3, 4}), random_param("b", {3, 4}), random_param("w", {4, 2}),
                                 random_param("r", {4}),
                                 Parameter("s", DenseArray::scalar(rng.uniform(0.5, 1.5)))};
    std::vector<Parameter*> params;
    for (Parameter& p : store) params.push_back(&p);
    const auto leaves = [&](Tape& t) {
      std::vector<Var> v;
      for (Parameter& p : store) v.push_back(t.param(p));
      return v;
    };
    const std::vector<std::size_t> labels{1, 0, 1};
    const std::vector<std::pair<std::string, std::function<Var(std::vector<Var>&)>>> ops{
        {"matmul", [](auto& v) { return sum(tanh(matmul(v[0], v[2]))); }},
        {"add", [](auto& v) { return sum(square(add(v[0], v[1]))); }},
        {"sub", [](auto& v) { return sum(square(sub(v[0], v[1]))); }},
        {"mul", [](auto& v) { return sum(mul(v[0], v[1])); }},
        {"scalar broadcast", [](auto& v) { return sum(square(mul(v[0], v[4]))); }},
        {"neg", [](auto& v) { return sum(mul(neg(v[0]), v[1])); }},
        {"tanh", [](auto& v) { return sum(tanh(v[0])); }},
        {"exp", [](auto& v) { return sum(exp(v[0])); }},
        {"log", [](auto& v) { return sum(log(add(square(v[0]), v[0].tape().constant(DenseArray::scalar(0.5))))); }},
        {"square", [](auto& v) { return sum(mul(square(v[0]), v[1])); }},
        {"scale", [](auto& v) { return sum(square(scale(v[0], -2.5))); }},
        {"add_row", [](auto& v) { return sum(square(add_row(v[0], v[3]))); }},
        {"mul_row", [](auto& v) { return sum(square(mul_row(v[0], v[3]))); }},
        {"mean", [](auto& v) { return mean(square(v[0])); }},
        {"row_sum", [](auto& v) { return sum(square(row_sum(v[0]))); }},
        {"reshape", [](auto& v) { return sum(tanh(matmul(reshape(v[0], {4, 3}), v[1]))); }},
        {"softmax_cross_entropy", [&](auto& v) { return softmax_cross_entropy(matmul(v[0], v[2]), labels); }},
    };
    for (const auto& [name, op] : ops) {
      note(name, gradient_error(params, [&](Tape& t) {
             auto v = leaves(t);
             return op(v);
           }));
    }

    const std::size_t d = 4;
    FlowModel model(FlowConfig{.input_dim = d, .num_layers = 2, .hidden_units = 5, .zero_init_output = false},
                    20 + static_cast<std::uint64_t>(trial));
    SelfSupHead head(d, 3, 30 + static_cast<std::uint64_t>(trial));
    LinearRelations rel;
    rel.columns = {"a", "b"};
    rel.coefficients = DenseArray::matrix(1, 2, {1.0, -0.5});
    rel.offsets = {0.1};
    LinearRelationPenalty penalty(rel);
    const DenseArray nominal = uniform_rows(4, d, rng, 1.0), permuted = uniform_rows(3, d, rng, 1.0);
    const std::vector<std::size_t> perm_labels{2, 0, 1};
    const LossConfig cfg{.physics_weight = 0.7, .selfsup_weight = 0.5, .penalty_samples = 3};
    auto all = model.parameters();
    for (Parameter* p : head.parameters()) all.push_back(p);
    note("main loss", gradient_error(all, [&](Tape& t) {
           Rng draws(21);
           return main_loss(t, model, t.constant(nominal), &penalty, cfg, draws);
         }));
    note("self-supervised loss",
         gradient_error(all, [&](Tape& t) { return selfsup_loss(t, model, head, t.constant(permuted), perm_labels); }));
    note("multi-task loss", gradient_error(all, [&](Tape& t) {
           Rng draws(21);
           return multitask_loss(t, model, head, t.constant(nominal), t.constant(permuted), perm_labels, &penalty, cfg,
                                 draws);
         }));
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-5 && secs < 120.0,
          fmt::format("worst relative error {:.2e} ({}) (<1e-5), {:.1f} s (<120 s)", worst, worst_name, secs)};
}

Outcome set_score_oracle() {
  const std::vector<Permutation> example{Permutation({0, 1, 2}), Permutation({2, 1, 0})};
  const std::int64_t d12 = score_set(example);
  Rng rng(3);
  std::size_t mismatches = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng.uniform_index(4);
    const std::size_t max_p = n == 2 ? 2 : 4;
    const std::size_t p = 1 + rng.uniform_index(max_p);
    std::set<std::vector<std::size_t>> chosen;
    while (chosen.size() < p) {
      std::vector<std::size_t> m(n);
      for (std::size_t i = 0; i < n; ++i) m[i] = i;
      rng.shuffle(std::span<std::size_t>(m));
      chosen.insert(m);
    }
    std::vector<Permutation> perms;
    std::vector<std::vector<int>> ints;
    for (const auto& m : chosen) {
      perms.emplace_back(m);
      ints.emplace_back(m.begin(), m.end());
    }
    if (score_set(perms) != oracle::set_score(ints)) ++mismatches;
  }
  return {d12 == 12 && mismatches == 0,
          fmt::format("n=3 example D={} (=12), {} mismatches over 100 random sets with n<=5, P<=4", d12, mismatches)};
}

ScoreSet labelled(std::vector<double> pos, std::vector<double> neg) {
  ScoreSet s;
  for (const double v : pos) {
    s.scores.push_back(v);
    s.positive.push_back(true);
  }
  for (const double v : neg) {
    s.scores.push_back(v);
    s.positive.push_back(false);
  }
  return s;
}

Outcome metrics_oracle() {
  const double ex_auroc = auroc(labelled({0.9, 0.8}, {0.85, 0.7}));
  const double ex_fpr = fpr95(labelled({0.9, 0.8}, {0.85, 0.5}));
  const double ex_ap = average_precision(labelled({0.9, 0.6}, {0.8}));
  Rng rng(77);
  std::size_t mismatches = 0;
  for (int trial = 0; trial < 200; ++trial) {
    ScoreSet s;
    const std::size_t n = 2 + rng.uniform_index(199);
    const bool coarse = trial % 2 == 0;
    for (std::size_t i = 0; i < n; ++i) {
      const bool pos = i == 0 || (i > 1 && rng.uniform01() < 0.4);
      double v = rng.normal() + (pos ? 0.8 : 0.0);
      if (coarse) v = std::round(v * 2.0) / 2.0;
      s.scores.push_back(v);
      s.positive.push_back(pos);
    }
    const auto o = oracle::sweep_metrics(s.scores, s.positive);
    if (auroc(s) != o.auroc || fpr95(s) != o.fpr95 || best_f1(s).f1 != o.f1 ||
        average_precision(s) != o.average_precision) {
      ++mismatches;
    }
  }
  const bool examples = ex_auroc == 0.75 && ex_fpr == 0.5 && std::abs(ex_ap - 5.0 / 6.0) < 1e-15;
  return {examples && mismatches == 0,
          fmt::format("examples AUROC {} FPR95 {} AP {:.4f}, {} mismatches over 200 random sets", ex_auroc, ex_fpr,
                      ex_ap, mismatches)};
}

Outcome selfsup_anchors() {
  double worst = 0.0;
  for (const std::size_t classes : {4000ul, 8000ul, 10000ul}) {
    FlowModel model(FlowConfig{.input_dim = 8, .num_layers = 2, .hidden_units = 4, .zero_init_output = false}, 1);
    SelfSupHead head(8, classes, 0, true);
    Rng rng(2);
    DenseArray batch({5, 8});
    for (double& v : batch.values()) v = rng.uniform01();
    const std::vector<std::size_t> labels{0, 1, classes / 2, classes - 2, classes - 1};
    Tape tape(false);
    const double loss = selfsup_loss(tape, model, head, tape.constant(batch), labels).value().item();
    worst = std::max(worst, std::abs(loss - std::log(static_cast<double>(classes))));
  }
  return {worst < 1e-9, fmt::format("max |loss - ln P| {:.2e} for P in 4000, 8000, 10000 (<1e-9)", worst)};
}

std::vector<double> weights(FlowModel& flow) {
  std::vector<double> out;
  for (Parameter* p : flow.parameters()) out.insert(out.end(), p->value.values().begin(), p->value.values().end());
  return out;
}

Outcome degenerate_equivalence() {
  const TrainingData data = fixture::toy_training_data();
  const PermutationSet perms = generate_set(3, 4, 10, 1);
  LinearRelations rel;
  rel.columns = {"a", "b", "c"};
  rel.coefficients = DenseArray({1, 3}, std::vector<double>{1.0, 1.0, -2.0});
  rel.offsets = {0.0};
  std::size_t checked = 0, equal = 0;
  for (const std::uint64_t seed : {1ull, 2ull, 3ull}) {
    TrainConfig cfg = fixture::tiny_config();
    cfg.seed = seed;
    LinearRelationPenalty p0(rel), p1(rel), p2(rel);
    TrainResult base = train_baseline(cfg, data, &p0);
    TrainConfig zero_lambda = cfg;
    zero_lambda.lambda = 0.0;
    TrainResult multi = train_multitask(zero_lambda, data, perms, &p1);
    TrainConfig no_pretrain = cfg;
    no_pretrain.pretrain_epochs = 0;
    TrainResult pre = train_pretrain_finetune(no_pretrain, data, perms, &p2);
    const auto w = weights(base.flow);
    equal += (weights(multi.flow) == w) + (weights(pre.flow) == w);
    checked += 2;
  }
  return {equal == checked, fmt::format("{}/{} runs bitwise equal to the baseline weights", equal, checked)};
}

// Acceptance training settings; see README for the reasoning.
TrainConfig e2e_train_config() {
  TrainConfig cfg;
  cfg.permutations = 200;
  cfg.epochs = 30;
  cfg.pretrain_epochs = 15;
  cfg.batch_size = 32;
  cfg.patience = 8;
  cfg.learning_rate = 1e-3;
  cfg.penalty_samples = 8;
  cfg.train_stride = 10;
  cfg.test_stride = 5;
  return cfg;
}

struct EndToEnd {
  bool ran = false;
  fs::path out;
  ExperimentResult result;
};

Outcome directional(const fs::path& work, std::size_t jobs, EndToEnd& e2e) {
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path corpus = work / "corpus";
  fs::create_directories(corpus);
  SynthConfig synth;
  synth.files = 24;
  synth.rows_per_file = 850;
  RandomFaultSpec faults;
  faults.file_probability = 0.8;
  faults.max_per_file = 2;
  faults.min_length = 40;
  faults.max_length = 120;
  synth.random_faults = faults;
  const SynthResult data = synth_eps(synth, 3);
  export_csv(corpus / "telemetry.csv", data.table, true);
  write_relations(corpus / "relations.txt", data.relations);
  save_split_plan(corpus / "splits.json", plan_splits(data.table.sources(), 7, 1));

  ExperimentConfig cfg;
  cfg.data = corpus / "telemetry.csv";
  cfg.splits = corpus / "splits.json";
  cfg.relations = corpus / "relations.txt";
  cfg.arms = {arm_from_name("baseline"), arm_from_name("multitask_complete"), arm_from_name("pretrain_complete"),
              arm_from_name("selfsup_only_complete")};
  cfg.seeds = {0, 1, 2, 3, 4};
  cfg.train = e2e_train_config();
  cfg.jobs = jobs;
  e2e.out = work / "experiment";
  fs::remove_all(e2e.out);
  e2e.result = run_experiment(cfg, e2e.out);
  e2e.ran = true;
  const double secs = seconds_since(t0);

  std::map<std::string, ArmSummary> by_arm;
  for (const ArmSummary& s : e2e.result.summary) by_arm[s.arm] = s;
  std::size_t failed = 0;
  for (const CellResult& c : e2e.result.cells) failed += c.ok ? 0 : 1;

  const double base = by_arm["baseline"].auroc.mean;
  bool ordering = failed == 0 && by_arm.size() == cfg.arms.size();
  double highest = -1.0;
  std::string detail;
  for (const Arm& arm : cfg.arms) {
    const ArmSummary& s = by_arm[arm.name];
    detail += fmt::format("{} {:.4f}+-{:.4f}, ", arm.name, s.auroc.mean, s.auroc.std);
    highest = std::max(highest, s.auroc.mean);
    if (arm.setting != Setting::kBaseline && !(s.auroc.mean >= base)) ordering = false;
  }
  const ArmSummary& complete = by_arm["selfsup_only_complete"];
  const bool top = complete.auroc.mean >= highest || highest - complete.auroc.mean <= complete.auroc.std;
  return {ordering && top && secs < 1800.0,
          fmt::format("mean AUROC {}every self-supervised arm >= baseline: {}, selfsup_only_complete highest or "
                      "within 1 std: {}, {} failed cells, {:.0f} s (<1800 s)",
                      detail, ordering ? "yes" : "no", top ? "yes" : "no", failed, secs)};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

Outcome reproducibility(const fs::path& work, EndToEnd& e2e) {
  if (!e2e.ran) {
    const fs::path corpus = work / "small_corpus";
    fs::create_directories(corpus);
    fixture::write_small_corpus(corpus);
    ExperimentConfig cfg;
    cfg.data = corpus / "telemetry.csv";
    cfg.splits = corpus / "splits.json";
    cfg.relations = corpus / "relations.txt";
    cfg.arms = {arm_from_name("baseline"), arm_from_name("selfsup_only_complete")};
    cfg.seeds = {0};
    cfg.train = fixture::corpus_config();
    e2e.out = work / "small_experiment";
    fs::remove_all(e2e.out);
    e2e.result = run_experiment(cfg, e2e.out);
  }
  // The last finished cell of every arm.
  std::map<std::string, CellResult> picks;
  for (const CellResult& c : e2e.result.cells) {
    if (c.ok) picks[c.arm] = c;
  }
  std::size_t identical = 0;
  for (const auto& [name, c] : picks) {
    const fs::path dir = cell_dir(e2e.out, {arm_from_name(c.arm), c.split, c.seed});
    const fs::path again = work / "rerun" / c.arm;
    fs::remove_all(again);
    rerun_cell(dir / "manifest.json", again);
    if (slurp(again / "metrics.json") == slurp(dir / "metrics.json") && !slurp(dir / "metrics.json").empty()) {
      ++identical;
    }
  }
  return {!picks.empty() && identical == picks.size(),
          fmt::format("{}/{} cells rerun from their manifests gave byte-identical metrics.json", identical,
                      picks.size())};
}

}  // namespace

int main(int argc, char** argv) {
  fs::path work = fs::temp_directory_path() / "permflow_acceptance";
  std::size_t jobs = 1;
  bool skip_e2e = false;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--work" && i + 1 < argc) {
      work = argv[++i];
    } else if (a == "--jobs" && i + 1 < argc) {
      jobs = std::stoul(argv[++i]);
    } else if (a == "--skip-e2e") {
      skip_e2e = true;
    } else {
      std::cerr << "usage: acceptance [--work DIR] [--jobs N] [--skip-e2e]\n";
      return 2;
    }
  }
  fs::create_directories(work);
  logging::set_level(logging::Level::kWarn);

  EndToEnd e2e;
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"flow-correctness", flow_correctness},
      {"gradient-suite", gradients},
      {"permutation-set-score-oracle", set_score_oracle},
      {"metrics-oracle", metrics_oracle},
      {"selfsup-loss-anchors", selfsup_anchors},
      {"degenerate-equivalence", degenerate_equivalence},
      {"directional-end-to-end",
       [&] { return skip_e2e ? Outcome{false, "skipped"} : directional(work, jobs, e2e); }},
      {"reproducibility", [&] { return reproducibility(work, e2e); }},
  };
  bool all = true;
  for (const auto& [name, check] : criteria) {
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, fmt::format("error: {}", e.what())};
    }
    all = all && o.pass;
    std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << std::endl;
  }
  return all ? 0 : 1;
}
