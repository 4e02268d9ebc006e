#pragma once

// Sensor-permutation pretext task: permutation sets, permuted windows and the
// classification head trained on top of the flow's latent output.

#include <compare>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <vector>

#include "permflow/diffcore.hpp"
#include "permflow/flow.hpp"

namespace permflow {

// Entry k is the source sensor placed at position k (0-based).
class Permutation {
 public:
  Permutation() = default;
  // Throws ContractError unless mapping is a bijection on {0..n-1}.
  explicit Permutation(std::vector<std::size_t> mapping);
  static Permutation identity(std::size_t n);

  std::size_t size() const noexcept { return mapping_.size(); }
  std::size_t operator[](std::size_t k) const { return mapping_[k]; }
  const std::vector<std::size_t>& mapping() const noexcept { return mapping_; }
  Permutation inverse() const;
  bool is_identity() const;

  friend auto operator<=>(const Permutation&, const Permutation&) = default;

 private:
  std::vector<std::size_t> mapping_;
};

// Sum over positions of |a_k - b_k|.
std::int64_t permutation_distance(const Permutation& a, const Permutation& b);
// Sum over positions of |k - p_k|.
std::int64_t displacement(const Permutation& p);

// Pairwise distances over ordered pairs plus every member's displacement.
std::int64_t score_set(std::span<const Permutation> permutations);

class PermutationSet {
 public:
  PermutationSet() = default;
  // Validates distinctness, equal sizes and P >= 2; computes the score.
  PermutationSet(std::vector<Permutation> permutations, std::uint64_t seed = 0,
                 std::size_t pool_factor = 0);

  std::size_t sensors() const noexcept { return sensors_; }
  std::size_t size() const noexcept { return permutations_.size(); }
  std::int64_t score() const noexcept { return score_; }
  std::uint64_t seed() const noexcept { return seed_; }
  std::size_t pool_factor() const noexcept { return pool_factor_; }
  const Permutation& operator[](std::size_t label) const { return permutations_.at(label); }
  const std::vector<Permutation>& permutations() const noexcept { return permutations_; }

 private:
  std::size_t sensors_ = 0;
  std::vector<Permutation> permutations_;
  std::int64_t score_ = 0;
  std::uint64_t seed_ = 0;
  std::size_t pool_factor_ = 0;
};

// Draws min(pool_factor * P, n!) distinct random permutations, then greedily
// keeps the P with the largest marginal score gain. Deterministic in
// (n, P, pool_factor, seed).
PermutationSet generate_set(std::size_t n, std::size_t count, std::size_t pool_factor,
                            std::uint64_t seed);

void write_permutation_set(std::ostream& out, const PermutationSet& set);
void write_permutation_set(const std::filesystem::path& path, const PermutationSet& set);
PermutationSet read_permutation_set(std::istream& in, const std::string& source = "<stream>");
PermutationSet read_permutation_set(const std::filesystem::path& path);

// window is [T x n] (or any array of T*n values laid out time-major); the
// result is the flattened [T*n] window whose column k is source column p[k].
DenseArray apply_permutation(const DenseArray& window, const Permutation& p);
void apply_permutation(std::span<const double> window, const Permutation& p,
                       std::span<double> out);

// Rows of `windows` ([W x T*n]) picked by `rows`, each permuted by
// set[labels[i]]. Returns [B x T*n].
DenseArray permuted_batch(const DenseArray& windows, std::span<const std::size_t> rows,
                          std::span<const std::size_t> labels, const PermutationSet& set);

// One fully-connected layer from the latent dimension to P logits.
class SelfSupHead {
 public:
  SelfSupHead() = default;
  SelfSupHead(std::size_t input_dim, std::size_t classes, std::uint64_t seed, bool zero = false);
  explicit SelfSupHead(DenseLayer layer);

  Var logits(Tape& tape, Var z);
  std::size_t classes() const { return layer_.out_features(); }
  std::size_t input_dim() const { return layer_.in_features(); }
  DenseLayer& layer() { return layer_; }
  const DenseLayer& layer() const { return layer_; }
  std::vector<Parameter*> parameters();

 private:
  DenseLayer layer_;
};

// Mean cross-entropy of head(flow(x)) against permutation labels.
Var selfsup_loss(Tape& tape, FlowModel& model, SelfSupHead& head, Var batch,
                 std::span<const std::size_t> labels);

struct SelfSupEval {
  double loss = 0.0;
  double accuracy = 0.0;
};
SelfSupEval evaluate_selfsup(FlowModel& model, SelfSupHead& head, const DenseArray& batch,
                             std::span<const std::size_t> labels);

}  // namespace permflow
