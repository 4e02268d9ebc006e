#include "permflow/splits.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include <fmt/format.h>

#include "permflow/errors.hpp"
#include "permflow/random.hpp"

namespace permflow {

SplitPlan plan_splits(std::vector<std::string> files, std::size_t k, std::uint64_t seed,
                      std::size_t train_parts, std::size_t test_parts) {
  if (files.size() < 2) throw ContractError("plan_splits: need at least 2 files");
  if (k == 0) throw ContractError("plan_splits: need at least one split");
  if (train_parts == 0 || test_parts == 0) throw ConfigError("plan_splits: ratio parts must be positive");
  if (std::set<std::string>(files.begin(), files.end()).size() != files.size()) {
    throw ContractError("plan_splits: duplicate file names");
  }
  std::sort(files.begin(), files.end());

  const double share = static_cast<double>(test_parts) / static_cast<double>(train_parts + test_parts);
  auto test_count = static_cast<std::size_t>(std::llround(share * static_cast<double>(files.size())));
  test_count = std::clamp<std::size_t>(test_count, 1, files.size() - 1);

  SplitPlan plan;
  plan.seed = seed;
  plan.train_parts = train_parts;
  plan.test_parts = test_parts;
  Rng rng(seed);
  for (std::size_t s = 0; s < k; ++s) {
    std::vector<std::string> order = files;
    rng.shuffle(std::span<std::string>(order));
    Split split;
    split.test_files.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(test_count));
    split.train_files.assign(order.begin() + static_cast<std::ptrdiff_t>(test_count), order.end());
    std::sort(split.test_files.begin(), split.test_files.end());
    std::sort(split.train_files.begin(), split.train_files.end());
    plan.splits.push_back(std::move(split));
  }
  return plan;
}

std::vector<std::size_t> reduced_indices(std::size_t count, double fraction, Rng& rng) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw ConfigError(fmt::format("reduced fraction must be in (0, 1], got {}", fraction));
  }
  const auto keep = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(count) - 1e-9));
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(std::span<std::size_t>(order));
  order.resize(std::min(keep, count));
  std::sort(order.begin(), order.end());
  return order;
}

void to_json(nlohmann::json& j, const SplitPlan& plan) {
  j = nlohmann::json{{"format_version", 1},
                     {"seed", plan.seed},
                     {"train_parts", plan.train_parts},
                     {"test_parts", plan.test_parts},
                     {"reduced_fraction", plan.reduced_fraction},
                     {"splits", nlohmann::json::array()}};
  for (const Split& s : plan.splits) {
    j["splits"].push_back({{"train", s.train_files}, {"test", s.test_files}});
  }
}

void from_json(const nlohmann::json& j, SplitPlan& plan) {
  plan.seed = j.at("seed").get<std::uint64_t>();
  plan.train_parts = j.value("train_parts", std::size_t{2});
  plan.test_parts = j.value("test_parts", std::size_t{1});
  plan.reduced_fraction = j.value("reduced_fraction", 0.34);
  plan.splits.clear();
  for (const auto& s : j.at("splits")) {
    Split split;
    split.train_files = s.at("train").get<std::vector<std::string>>();
    split.test_files = s.at("test").get<std::vector<std::string>>();
    if (split.test_files.empty()) throw DataError("split plan has a split with no test files");
    plan.splits.push_back(std::move(split));
  }
}

void save_split_plan(const std::filesystem::path& path, const SplitPlan& plan) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(fmt::format("cannot write split plan to {}", path.string()));
  out << nlohmann::json(plan).dump(2) << '\n';
}

SplitPlan load_split_plan(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(fmt::format("cannot open split plan {}", path.string()));
  try {
    return nlohmann::json::parse(in).get<SplitPlan>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(fmt::format("{}: {}", path.string(), e.what()));
  }
}

}  // namespace permflow
