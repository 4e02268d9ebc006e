#include <doctest.h>

#include <fstream>
#include <sstream>

#include "fixtures.hpp"
#include "permflow/errors.hpp"
#include "permflow/experiment.hpp"
#include "permflow/manifest.hpp"

using namespace permflow;
namespace fs = std::filesystem;

namespace {

ExperimentConfig small_experiment(const fs::path& corpus) {
  ExperimentConfig cfg;
  cfg.data = corpus / "telemetry.csv";
  cfg.splits = corpus / "splits.json";
  cfg.relations = corpus / "relations.txt";
  cfg.arms = {arm_from_name("baseline"), arm_from_name("multitask")};
  cfg.seeds = {0, 1};
  cfg.train = fixture::corpus_config();
  return cfg;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace

TEST_CASE("arms") {
  const auto arms = standard_arms();
  REQUIRE(arms.size() == 7);
  CHECK(arms[0].name == "baseline");
  CHECK(arm_from_name("pretrain_complete").scope == DataScope::kCompleteDataset);
  CHECK(arm_from_name("selfsup_only").setting == Setting::kSelfSupOnly);
  CHECK_THROWS_AS(arm_from_name("nope"), ConfigError);
}

TEST_CASE("summary statistics") {
  std::vector<CellResult> cells(3);
  const double aurocs[3] = {0.6, 0.7, 0.8};
  for (int i = 0; i < 3; ++i) {
    cells[i].arm = "baseline";
    cells[i].setting = "baseline";
    cells[i].ok = true;
    cells[i].metrics.auroc = aurocs[i];
  }
  cells.push_back(cells[0]);
  cells.back().ok = false;
  const auto summary = summarize(cells);
  REQUIRE(summary.size() == 1);
  CHECK(summary[0].cells == 3);
  CHECK(summary[0].failed == 1);
  CHECK(summary[0].auroc.mean == doctest::Approx(0.7).epsilon(1e-15));
  CHECK(summary[0].auroc.std == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(render_summary(summary).find("70.00 ± 10.00") != std::string::npos);
}

TEST_CASE("experiment matrix, report and manifest rerun") {
  const fs::path corpus = fixture::scratch_dir("experiment_corpus");
  fixture::write_small_corpus(corpus);
  const fs::path out = fixture::scratch_dir("experiment_out");
  const ExperimentConfig cfg = small_experiment(corpus);

  const ExperimentResult result = run_experiment(cfg, out);
  REQUIRE(result.cells.size() == 8);
  for (const CellResult& c : result.cells) CHECK_MESSAGE(c.ok, c.error);
  REQUIRE(result.summary.size() == 2);
  for (const ArmSummary& s : result.summary) CHECK(s.cells == 4);

  std::ifstream csv(out / "report.csv");
  std::size_t lines = 0;
  for (std::string line; std::getline(csv, line);) ++lines;
  CHECK(lines == 9);

  const auto collected = collect_results(out);
  REQUIRE(collected.size() == 8);
  CHECK(collected[0].arm == "baseline");
  CHECK(collected[7].arm == "multitask");

  // Mean over the stored cells matches the summary.
  double mean = 0.0;
  for (const CellResult& c : collected) {
    if (c.arm == "baseline") mean += c.metrics.auroc / 4.0;
  }
  CHECK(mean == doctest::Approx(result.summary[0].auroc.mean).epsilon(1e-12));

  const fs::path cell = cell_dir(out, {arm_from_name("multitask"), 1, 1});
  const fs::path rerun = out / "rerun";
  const CellResult again = rerun_cell(cell / "manifest.json", rerun);
  CHECK(slurp(rerun / "metrics.json") == slurp(cell / "metrics.json"));
  CHECK(slurp(rerun / "checkpoint.bin") == slurp(cell / "checkpoint.bin"));
  CHECK(again.metrics.auroc == collected[7].metrics.auroc);

  // Tampered inputs are refused.
  {
    std::ofstream extra(corpus / "relations.txt", std::ios::app);
    extra << "\n";
  }
  CHECK_THROWS_AS(rerun_cell(cell / "manifest.json", out / "rerun2"), DataError);
}

TEST_CASE("config json rejects unknown keys and resolves paths") {
  const fs::path dir = fixture::scratch_dir("experiment_config");
  {
    std::ofstream f(dir / "exp.json");
    f << R"({"data": "d.csv", "splits": "s.json", "arms": ["baseline", "pretrain"], "seeds": [3]})";
  }
  const ExperimentConfig cfg = load_experiment_config(dir / "exp.json");
  CHECK(cfg.data == dir / "d.csv");
  CHECK(cfg.arms.size() == 2);
  CHECK(cfg.seeds == std::vector<std::uint64_t>{3});
  {
    std::ofstream f(dir / "bad.json");
    f << R"({"data": "d.csv", "splits": "s.json", "colour": 1})";
  }
  CHECK_THROWS_AS(load_experiment_config(dir / "bad.json"), ConfigError);
}

TEST_CASE("manifest hashes") {
  CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  const fs::path dir = fixture::scratch_dir("manifest");
  {
    std::ofstream f(dir / "in.txt");
    f << "hello";
  }
  Manifest m("test", nlohmann::json::object());
  m.add_input("data", dir / "in.txt");
  m.write(dir / "m.json");
  const Manifest back = Manifest::read(dir / "m.json");
  CHECK(back.input("data") == fs::absolute(dir / "in.txt"));
  {
    std::ofstream f(dir / "in.txt");
    f << "changed";
  }
  CHECK_THROWS_AS(back.input("data"), DataError);
  CHECK_THROWS_AS(back.input("missing"), DataError);
}
