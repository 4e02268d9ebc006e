#include "fixtures.hpp"

#include <cmath>
#include <numeric>

#include "permflow/losses.hpp"
#include "permflow/random.hpp"
#include "permflow/splits.hpp"
#include "permflow/synth.hpp"

namespace fixture {

using permflow::DenseArray;
using permflow::RowLabel;
using permflow::WindowedDataset;

WindowedDataset toy_windows(std::size_t count, std::size_t length, std::size_t sensors, std::uint64_t seed) {
  permflow::Rng rng(seed);
  WindowedDataset ds;
  ds.length = length;
  ds.sensors = sensors;
  std::vector<double> values;
  for (std::size_t w = 0; w < count; ++w) {
    const bool fault = w % 4 == 3;
    const double level = rng.uniform(0.2, 0.8);
    for (std::size_t t = 0; t < length; ++t) {
      for (std::size_t s = 0; s < sensors; ++s) {
        double v = level * (1.0 + 0.1 * static_cast<double>(s)) * 0.8 + 0.03 * rng.normal();
        if (fault && s == 0) v += 0.4;
        values.push_back(v);
      }
    }
    ds.labels.push_back(fault ? RowLabel::kFault : RowLabel::kNominal);
    ds.sources.push_back("toy");
    ds.start_rows.push_back(w * length);
  }
  ds.windows = DenseArray({count, length * sensors}, std::move(values));
  return ds;
}

permflow::TrainingData toy_training_data(std::size_t length, std::size_t sensors, std::uint64_t seed) {
  permflow::TrainingData data;
  const WindowedDataset train = toy_windows(96, length, sensors, seed);
  const WindowedDataset val = toy_windows(40, length, sensors, seed + 1);
  data.main_train = train.with_label(RowLabel::kNominal);
  data.main_validation = val.with_label(RowLabel::kNominal);
  data.selfsup_train = train;
  data.selfsup_validation = val;
  return data;
}

permflow::TrainConfig tiny_config() {
  permflow::TrainConfig cfg;
  cfg.epochs = 6;
  cfg.pretrain_epochs = 4;
  cfg.batch_size = 16;
  cfg.patience = 3;
  cfg.permutations = 4;
  cfg.hidden_units = 8;
  cfg.coupling_layers = 2;
  cfg.penalty_samples = 4;
  cfg.learning_rate = 5e-3;
  cfg.seed = 11;
  return cfg;
}

std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("permflow_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

void write_small_corpus(const std::filesystem::path& dir) {
  permflow::SynthConfig cfg;
  cfg.files = 6;
  cfg.rows_per_file = 240;
  permflow::RandomFaultSpec faults;
  faults.file_probability = 1.0;
  faults.min_length = 20;
  faults.max_length = 60;
  cfg.random_faults = faults;
  const permflow::SynthResult r = permflow::synth_eps(cfg, 21);
  permflow::export_csv(dir / "telemetry.csv", r.table, true);
  permflow::write_relations(dir / "relations.txt", r.relations);
  permflow::save_split_plan(dir / "splits.json", permflow::plan_splits(r.table.sources(), 2, 4));
}

permflow::TrainConfig corpus_config() {
  permflow::TrainConfig cfg;
  cfg.window = 5;
  cfg.train_stride = 5;
  cfg.test_stride = 5;
  cfg.epochs = 3;
  cfg.pretrain_epochs = 2;
  cfg.batch_size = 32;
  cfg.patience = 3;
  cfg.permutations = 6;
  cfg.hidden_units = 8;
  cfg.coupling_layers = 2;
  cfg.penalty_samples = 4;
  cfg.learning_rate = 1e-3;
  return cfg;
}

}  // namespace fixture
