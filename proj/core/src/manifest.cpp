#include "permflow/manifest.hpp"

#include <array>
#include <fstream>
#include <memory>

#include <fmt/format.h>
#include <openssl/evp.h>

#include "permflow/errors.hpp"

namespace permflow {

namespace {

using DigestContext = std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)>;

DigestContext new_context() {
  DigestContext ctx(EVP_MD_CTX_new(), &EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) throw Error("sha256: digest init failed");
  return ctx;
}

std::string finish(EVP_MD_CTX* ctx) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int len = 0;
  if (EVP_DigestFinal_ex(ctx, digest.data(), &len) != 1) throw Error("sha256: digest final failed");
  std::string hex;
  for (unsigned int i = 0; i < len; ++i) hex += fmt::format("{:02x}", digest[i]);
  return hex;
}

nlohmann::json file_entry(const std::filesystem::path& path) {
  return {{"path", std::filesystem::absolute(path).lexically_normal().string()}, {"sha256", sha256_file(path)}};
}

}  // namespace

std::string sha256_hex(std::string_view bytes) {
  auto ctx = new_context();
  EVP_DigestUpdate(ctx.get(), bytes.data(), bytes.size());
  return finish(ctx.get());
}

std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(fmt::format("cannot open {} for hashing", path.string()));
  auto ctx = new_context();
  std::array<char, 1 << 16> buf{};
  while (in) {
    in.read(buf.data(), buf.size());
    if (in.gcount() > 0) EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  return finish(ctx.get());
}

Manifest::Manifest(std::string command, nlohmann::json config) {
  doc_["tool"] = "permflow";
  doc_["format_version"] = 1;
  doc_["command"] = std::move(command);
  doc_["config"] = std::move(config);
  doc_["inputs"] = nlohmann::json::object();
  doc_["outputs"] = nlohmann::json::object();
}

void Manifest::add_input(const std::string& role, const std::filesystem::path& path) {
  doc_["inputs"][role] = file_entry(path);
}

void Manifest::add_output(const std::string& role, const std::filesystem::path& path) {
  doc_["outputs"][role] = file_entry(path);
}

bool Manifest::has_input(const std::string& role) const {
  return doc_.contains("inputs") && doc_["inputs"].contains(role);
}

std::filesystem::path Manifest::input(const std::string& role, bool verify) const {
  if (!has_input(role)) throw DataError(fmt::format("manifest has no '{}' input", role));
  const auto& entry = doc_["inputs"][role];
  const std::filesystem::path path = entry.at("path").get<std::string>();
  if (verify && sha256_file(path) != entry.at("sha256").get<std::string>()) {
    throw DataError(fmt::format("{} changed since the manifest was written", path.string()));
  }
  return path;
}

void Manifest::write(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError(fmt::format("cannot write manifest {}", path.string()));
  out << doc_.dump(2) << '\n';
  out.flush();
  if (!out) throw DataError(fmt::format("failed writing manifest {}", path.string()));
}

Manifest Manifest::read(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError(fmt::format("cannot open manifest {}", path.string()));
  Manifest m;
  try {
    m.doc_ = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(fmt::format("{}: malformed manifest: {}", path.string(), e.what()));
  }
  if (!m.doc_.is_object() || m.doc_.value("tool", "") != "permflow") {
    throw DataError(fmt::format("{}: not a permflow manifest", path.string()));
  }
  return m;
}

}  // namespace permflow
