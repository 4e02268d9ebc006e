#pragma once

// Main loss (negative log-likelihood plus a physics penalty on generated
// samples) and its multi-task combination with the permutation loss.

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "permflow/diffcore.hpp"
#include "permflow/flow.hpp"
#include "permflow/random.hpp"
#include "permflow/selfsup.hpp"

namespace permflow {

// Rows of A x = b over the sensor columns of a single timestamp.
struct LinearRelations {
  std::vector<std::string> columns;
  DenseArray coefficients{Shape{0, 0}};  // [relations x sensors]
  std::vector<double> offsets;

  std::size_t count() const { return offsets.size(); }
  std::size_t sensors() const { return columns.size(); }

  // Relations expressed on min-max scaled columns, x_raw = min + range * x.
  LinearRelations rescaled(std::span<const double> mins, std::span<const double> ranges) const;
  // Reorders and subsets columns to match `names`; unknown names are an error.
  LinearRelations reordered(std::span<const std::string> names) const;
};

void write_relations(std::ostream& out, const LinearRelations& relations);
void write_relations(const std::filesystem::path& path, const LinearRelations& relations);
LinearRelations read_relations(std::istream& in, const std::string& source = "<stream>");
LinearRelations read_relations(const std::filesystem::path& path);

// Evaluation contract for physics-informed penalties: generated samples in
// (scaled) data space, [batch x T*n], to a non-negative scalar that is zero
// when every relation holds.
class PhysicsPenalty {
 public:
  virtual ~PhysicsPenalty() = default;
  virtual Var evaluate(Tape& tape, Var samples) = 0;
};

// Mean over samples and timestamps of ||A x_t - b||^2.
Var reference_penalty(Tape& tape, Var samples, const LinearRelations& relations);
double reference_penalty(const DenseArray& samples, const LinearRelations& relations);

class LinearRelationPenalty final : public PhysicsPenalty {
 public:
  explicit LinearRelationPenalty(LinearRelations relations) : relations_(std::move(relations)) {}
  Var evaluate(Tape& tape, Var samples) override {
    return reference_penalty(tape, samples, relations_);
  }
  const LinearRelations& relations() const { return relations_; }

 private:
  LinearRelations relations_;
};

struct LossConfig {
  double physics_weight = 1.0;
  double selfsup_weight = 1.0;  // lambda
  std::size_t penalty_samples = 32;

  void validate() const;
};

// mean(-log p(x)) + physics_weight * penalty(inverse flow of fresh base draws).
// `rng` supplies the base draws and is untouched when the penalty is off.
Var main_loss(Tape& tape, FlowModel& model, Var nominal_batch, PhysicsPenalty* penalty,
              const LossConfig& cfg, Rng& rng);

// main_loss + lambda * selfsup_loss. With lambda == 0 the permutation branch
// is not evaluated at all.
Var multitask_loss(Tape& tape, FlowModel& model, SelfSupHead& head, Var nominal_batch,
                   Var permuted_batch, std::span<const std::size_t> labels,
                   PhysicsPenalty* penalty, const LossConfig& cfg, Rng& rng);

}  // namespace permflow
