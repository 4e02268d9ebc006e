#pragma once

// Run manifests: resolved configuration, seeds and SHA-256 hashes of every
// input, written before a run computes anything and completed with output
// hashes once it finishes.

#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

namespace permflow {

std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);

class Manifest {
 public:
  Manifest() = default;
  Manifest(std::string command, nlohmann::json config);

  // Records the absolute path and hash of an input file under `role`.
  void add_input(const std::string& role, const std::filesystem::path& path);
  void add_output(const std::string& role, const std::filesystem::path& path);
  void set(const std::string& key, nlohmann::json value) { doc_[key] = std::move(value); }

  const nlohmann::json& json() const noexcept { return doc_; }
  nlohmann::json& json() noexcept { return doc_; }

  // Input path recorded under `role`; DataError when absent, or when
  // `verify` is set and the file no longer matches its hash.
  std::filesystem::path input(const std::string& role, bool verify = true) const;
  bool has_input(const std::string& role) const;

  void write(const std::filesystem::path& path) const;
  static Manifest read(const std::filesystem::path& path);

 private:
  nlohmann::json doc_ = nlohmann::json::object();
};

}  // namespace permflow
