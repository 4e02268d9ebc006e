#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace permflow {

class Rng;

struct Split {
  std::vector<std::string> train_files;
  std::vector<std::string> test_files;
};

// k random file-level train/test partitions.
struct SplitPlan {
  std::uint64_t seed = 0;
  std::size_t train_parts = 2;
  std::size_t test_parts = 1;
  double reduced_fraction = 0.34;
  std::vector<Split> splits;

  std::size_t size() const noexcept { return splits.size(); }
};

// Each split shuffles the files and sends round(F * test/(train+test)) of
// them (at least one, at most F-1) to the test side.
SplitPlan plan_splits(std::vector<std::string> files, std::size_t k = 7, std::uint64_t seed = 0,
                      std::size_t train_parts = 2, std::size_t test_parts = 1);

// ceil(fraction * count) indices drawn without replacement, sorted.
std::vector<std::size_t> reduced_indices(std::size_t count, double fraction, Rng& rng);

void to_json(nlohmann::json& j, const SplitPlan& plan);
void from_json(const nlohmann::json& j, SplitPlan& plan);
void save_split_plan(const std::filesystem::path& path, const SplitPlan& plan);
SplitPlan load_split_plan(const std::filesystem::path& path);

}  // namespace permflow
