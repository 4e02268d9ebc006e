#include "permflow/selfsup.hpp"

#include <algorithm>
#include <fstream>
#include <istream>
#include <limits>
#include <map>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>
#include <string>

#include <fmt/format.h>

#include "permflow/errors.hpp"
#include "permflow/random.hpp"

namespace permflow {

namespace {

constexpr int kSetFormatVersion = 1;

// n! saturated at max size_t.
std::size_t saturating_factorial(std::size_t n) {
  std::size_t f = 1;
  for (std::size_t i = 2; i <= n; ++i) {
    if (f > std::numeric_limits<std::size_t>::max() / i) return std::numeric_limits<std::size_t>::max();
    f *= i;
  }
  return f;
}

}  // namespace

Permutation::Permutation(std::vector<std::size_t> mapping) : mapping_(std::move(mapping)) {
  std::vector<bool> seen(mapping_.size(), false);
  for (const std::size_t v : mapping_) {
    if (v >= mapping_.size() || seen[v]) {
      throw ContractError(fmt::format("permutation [{}] is not a bijection", fmt::join(mapping_, ",")));
    }
    seen[v] = true;
  }
}

Permutation Permutation::identity(std::size_t n) {
  std::vector<std::size_t> m(n);
  std::iota(m.begin(), m.end(), std::size_t{0});
  return Permutation(std::move(m));
}

Permutation Permutation::inverse() const {
  std::vector<std::size_t> inv(mapping_.size());
  for (std::size_t k = 0; k < mapping_.size(); ++k) inv[mapping_[k]] = k;
  return Permutation(std::move(inv));
}

bool Permutation::is_identity() const {
  for (std::size_t k = 0; k < mapping_.size(); ++k) {
    if (mapping_[k] != k) return false;
  }
  return true;
}

std::int64_t permutation_distance(const Permutation& a, const Permutation& b) {
  std::int64_t d = 0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    d += std::abs(static_cast<std::int64_t>(a[k]) - static_cast<std::int64_t>(b[k]));
  }
  return d;
}

std::int64_t displacement(const Permutation& p) {
  std::int64_t d = 0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    d += std::abs(static_cast<std::int64_t>(k) - static_cast<std::int64_t>(p[k]));
  }
  return d;
}

std::int64_t score_set(std::span<const Permutation> permutations) {
  std::int64_t pairwise = 0;
  std::int64_t deviation = 0;
  for (std::size_t i = 0; i < permutations.size(); ++i) {
    deviation += displacement(permutations[i]);
    for (std::size_t j = i + 1; j < permutations.size(); ++j) {
      pairwise += permutation_distance(permutations[i], permutations[j]);
    }
  }
  // Each unordered pair appears twice among ordered pairs.
  return 2 * pairwise + deviation;
}

PermutationSet::PermutationSet(std::vector<Permutation> permutations, std::uint64_t seed,
                               std::size_t pool_factor)
    : permutations_(std::move(permutations)), seed_(seed), pool_factor_(pool_factor) {
  if (permutations_.size() < 2) throw ContractError("a permutation set needs P >= 2");
  sensors_ = permutations_.front().size();
  std::set<Permutation> seen;
  for (const Permutation& p : permutations_) {
    if (p.size() != sensors_) throw DimensionError("permutations in a set must share n");
    if (!seen.insert(p).second) {
      throw ContractError(fmt::format("duplicate permutation [{}] in set", fmt::join(p.mapping(), ",")));
    }
  }
  score_ = score_set(permutations_);
}

PermutationSet generate_set(std::size_t n, std::size_t count, std::size_t pool_factor,
                            std::uint64_t seed) {
  if (n == 0) throw ConfigError("generate_set: n must be positive");
  if (count < 2) throw ConfigError("generate_set: P must be at least 2");
  if (pool_factor < 2) throw ConfigError("generate_set: pool_factor must be at least 2");
  const std::size_t group_order = saturating_factorial(n);
  if (count > group_order) {
    throw InfeasibleError(fmt::format("generate_set: P={} exceeds n!={} for n={}", count,
                                      group_order, n));
  }
  const std::size_t wanted =
      count > std::numeric_limits<std::size_t>::max() / pool_factor ? group_order
                                                                     : std::min(count * pool_factor, group_order);

  Rng rng(seed);
  std::vector<Permutation> pool;
  pool.reserve(wanted);
  if (wanted == group_order) {
    // The whole group is requested: enumerate it rather than wait on
    // coupon-collector sampling.
    std::vector<std::size_t> m(n);
    std::iota(m.begin(), m.end(), std::size_t{0});
    do {
      pool.emplace_back(m);
    } while (std::next_permutation(m.begin(), m.end()));
    rng.shuffle(std::span<Permutation>(pool));
  } else {
    std::set<std::vector<std::size_t>> seen;
    const std::size_t max_draws = 20 * wanted + 1000;
    std::size_t draws = 0;
    std::vector<std::size_t> m(n);
    while (pool.size() < wanted) {
      if (draws++ >= max_draws) {
        throw PoolError(fmt::format("generate_set: only {} distinct permutations after {} draws",
                                    pool.size(), max_draws));
      }
      std::iota(m.begin(), m.end(), std::size_t{0});
      rng.shuffle(std::span<std::size_t>(m));
      if (seen.insert(m).second) pool.emplace_back(m);
    }
  }

  // Marginal gain of adding c to the selection S is
  // displacement(c) + 2 * sum_{s in S} distance(c, s).
  std::vector<std::int64_t> gain(pool.size());
  for (std::size_t c = 0; c < pool.size(); ++c) gain[c] = displacement(pool[c]);
  std::vector<bool> taken(pool.size(), false);
  std::vector<Permutation> chosen;
  chosen.reserve(count);
  for (std::size_t step = 0; step < count; ++step) {
    std::size_t best = pool.size();
    for (std::size_t c = 0; c < pool.size(); ++c) {
      if (!taken[c] && (best == pool.size() || gain[c] > gain[best])) best = c;
    }
    taken[best] = true;
    chosen.push_back(pool[best]);
    for (std::size_t c = 0; c < pool.size(); ++c) {
      if (!taken[c]) gain[c] += 2 * permutation_distance(pool[c], pool[best]);
    }
  }
  return PermutationSet(std::move(chosen), seed, pool_factor);
}

// ---- file format ---------------------------------------------------------------

void write_permutation_set(std::ostream& out, const PermutationSet& set) {
  out << "# permflow permutation set\n";
  out << "format_version=" << kSetFormatVersion << '\n';
  out << "n=" << set.sensors() << '\n';
  out << "P=" << set.size() << '\n';
  out << "D=" << set.score() << '\n';
  out << "seed=" << set.seed() << '\n';
  out << "pool_factor=" << set.pool_factor() << '\n';
  for (const Permutation& p : set.permutations()) out << fmt::format("{}\n", fmt::join(p.mapping(), ","));
}

void write_permutation_set(const std::filesystem::path& path, const PermutationSet& set) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(fmt::format("cannot write permutation set to {}", path.string()));
  write_permutation_set(out, set);
}

namespace {

std::uint64_t parse_unsigned(const std::string& text, const std::string& source, std::size_t line) {
  std::size_t used = 0;
  std::uint64_t v = 0;
  try {
    if (text.empty() || text[0] == '-') throw std::invalid_argument("sign");
    v = std::stoull(text, &used);
  } catch (const std::exception&) {
    throw ParseError(source, line, fmt::format("expected a non-negative integer, got '{}'", text));
  }
  if (used != text.size()) {
    throw ParseError(source, line, fmt::format("expected a non-negative integer, got '{}'", text));
  }
  return v;
}

}  // namespace

PermutationSet read_permutation_set(std::istream& in, const std::string& source) {
  std::map<std::string, std::string> header;
  std::vector<Permutation> perms;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq != std::string::npos) {
      if (!perms.empty()) throw ParseError(source, lineno, "header field after permutation rows");
      header[line.substr(0, eq)] = line.substr(eq + 1);
      continue;
    }
    std::vector<std::size_t> mapping;
    std::stringstream row(line);
    std::string cell;
    while (std::getline(row, cell, ',')) mapping.push_back(parse_unsigned(cell, source, lineno));
    try {
      perms.emplace_back(std::move(mapping));
    } catch (const ContractError& e) {
      throw ParseError(source, lineno, e.what());
    }
  }
  for (const char* key : {"format_version", "n", "P", "D", "seed"}) {
    if (!header.contains(key)) throw ParseError(source, lineno, fmt::format("missing header field '{}'", key));
  }
  if (parse_unsigned(header["format_version"], source, 0) != kSetFormatVersion) {
    throw DataError(fmt::format("{}: unsupported format_version {}", source, header["format_version"]));
  }
  const auto n = parse_unsigned(header["n"], source, 0);
  const auto count = parse_unsigned(header["P"], source, 0);
  if (perms.size() != count) {
    throw DataError(fmt::format("{}: header says P={} but {} rows follow", source, count, perms.size()));
  }
  const auto pool_factor = header.contains("pool_factor") ? parse_unsigned(header["pool_factor"], source, 0) : 0;
  PermutationSet set;
  try {
    set = PermutationSet(std::move(perms), parse_unsigned(header["seed"], source, 0), pool_factor);
  } catch (const ContractError& e) {
    throw DataError(fmt::format("{}: {}", source, e.what()));
  }
  if (set.sensors() != n) throw DataError(fmt::format("{}: header n={} but rows have {} entries", source, n, set.sensors()));
  if (std::to_string(set.score()) != header["D"]) {
    throw DataError(fmt::format("{}: header D={} but rows score {}", source, header["D"], set.score()));
  }
  return set;
}

PermutationSet read_permutation_set(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(fmt::format("cannot open permutation set {}", path.string()));
  return read_permutation_set(in, path.string());
}

// ---- permuted windows ----------------------------------------------------------

void apply_permutation(std::span<const double> window, const Permutation& p, std::span<double> out) {
  const std::size_t n = p.size();
  if (n == 0 || window.size() % n != 0 || out.size() != window.size()) {
    throw DimensionError(fmt::format("apply_permutation: window of {} values does not fit {} sensors",
                                     window.size(), n));
  }
  const std::size_t steps = window.size() / n;
  for (std::size_t t = 0; t < steps; ++t) {
    const double* src = window.data() + t * n;
    double* dst = out.data() + t * n;
    for (std::size_t k = 0; k < n; ++k) dst[k] = src[p[k]];
  }
}

DenseArray apply_permutation(const DenseArray& window, const Permutation& p) {
  if (window.rank() == 2 && window.cols() != p.size()) {
    throw DimensionError(fmt::format("apply_permutation: window {} has {} columns, permutation has {}",
                                     shape_string(window.shape()), window.cols(), p.size()));
  }
  DenseArray out({window.size()});
  apply_permutation(window.values(), p, out.values());
  return out;
}

DenseArray permuted_batch(const DenseArray& windows, std::span<const std::size_t> rows,
                          std::span<const std::size_t> labels, const PermutationSet& set) {
  if (rows.size() != labels.size()) throw DimensionError("permuted_batch: rows and labels differ in length");
  const std::size_t d = windows.cols();
  DenseArray out({rows.size(), d});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (labels[i] >= set.size()) {
      throw IndexError(fmt::format("permutation label {} out of range [0, {})", labels[i], set.size()));
    }
    apply_permutation(windows.values().subspan(rows[i] * d, d), set[labels[i]],
                      out.values().subspan(i * d, d));
  }
  return out;
}

// ---- head and loss ----------------------------------------------------------------

SelfSupHead::SelfSupHead(std::size_t input_dim, std::size_t classes, std::uint64_t seed, bool zero)
    : layer_(make_dense("head", input_dim, classes, Activation::kLinear, seed, zero)) {
  if (classes < 2) throw ContractError("head needs at least 2 classes");
}

SelfSupHead::SelfSupHead(DenseLayer layer) : layer_(std::move(layer)) {}

Var SelfSupHead::logits(Tape& tape, Var z) { return layer_.forward(tape, z); }

std::vector<Parameter*> SelfSupHead::parameters() { return {&layer_.weight, &layer_.bias}; }

Var selfsup_loss(Tape& tape, FlowModel& model, SelfSupHead& head, Var batch,
                 std::span<const std::size_t> labels) {
  if (head.input_dim() != model.dim()) {
    throw DimensionError(fmt::format("head expects {} inputs, flow produces {}", head.input_dim(), model.dim()));
  }
  Var z = model.forward(tape, batch).z;
  return softmax_cross_entropy(head.logits(tape, z), labels);
}

SelfSupEval evaluate_selfsup(FlowModel& model, SelfSupHead& head, const DenseArray& batch,
                             std::span<const std::size_t> labels) {
  Tape tape(false);
  Var z = model.forward(tape, tape.constant(batch)).z;
  Var logits = head.logits(tape, z);
  SelfSupEval eval;
  eval.loss = softmax_cross_entropy(logits, labels).value().item();
  const DenseArray& lv = logits.value();
  std::size_t correct = 0;
  for (std::size_t i = 0; i < lv.rows(); ++i) {
    const double* row = lv.data() + i * lv.cols();
    const auto best = static_cast<std::size_t>(std::max_element(row, row + lv.cols()) - row);
    if (best == labels[i]) ++correct;
  }
  eval.accuracy = static_cast<double>(correct) / static_cast<double>(lv.rows());
  return eval;
}

}  // namespace permflow
