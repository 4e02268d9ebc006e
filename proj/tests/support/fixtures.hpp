#pragma once

// Small deterministic datasets shared by the training tests.

#include <cstdint>
#include <filesystem>

#include "permflow/telemetry.hpp"
#include "permflow/train.hpp"

namespace fixture {

// Windows of `length` rows over `sensors` correlated columns in [0, 1];
// every fourth window carries a fault bump.
permflow::WindowedDataset toy_windows(std::size_t count, std::size_t length, std::size_t sensors,
                                      std::uint64_t seed);

permflow::TrainingData toy_training_data(std::size_t length = 4, std::size_t sensors = 3, std::uint64_t seed = 7);

permflow::TrainConfig tiny_config();

// A fresh directory under the system temp dir, emptied first.
std::filesystem::path scratch_dir(const std::string& name);

// Writes telemetry.csv, relations.txt and splits.json for a small synthetic
// corpus (6 files, 2 splits) into dir.
void write_small_corpus(const std::filesystem::path& dir);

// Training settings small enough for end-to-end tests on that corpus.
permflow::TrainConfig corpus_config();

}  // namespace fixture
