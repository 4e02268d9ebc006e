#pragma once

#include <cstddef>
#include <limits>
#include <vector>

#include "permflow/diffcore.hpp"

namespace permflow {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Adam over a fixed parameter list. Moment buffers are keyed by position, so
// the list must not change between steps.
class Adam {
 public:
  Adam(std::vector<Parameter*> params, AdamConfig config = {});

  void step();
  void zero_grad();
  std::size_t steps() const noexcept { return steps_; }

 private:
  std::vector<Parameter*> params_;
  AdamConfig config_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  std::size_t steps_ = 0;
};

// Copies of parameter values, used to restore the best epoch.
std::vector<DenseArray> snapshot(const std::vector<Parameter*>& params);
void restore(const std::vector<Parameter*>& params, const std::vector<DenseArray>& values);

// Signals a stop after `patience` consecutive epochs that fail to improve the
// best validation loss by more than `min_delta`.
class EarlyStopper {
 public:
  EarlyStopper(std::size_t patience, double min_delta) : patience_(patience), min_delta_(min_delta) {}

  // Returns true when this epoch is the new best.
  bool observe(double validation_loss);
  bool should_stop() const noexcept { return since_improvement_ >= patience_; }
  double best() const noexcept { return best_; }
  std::size_t best_epoch() const noexcept { return best_epoch_; }
  std::size_t epochs_seen() const noexcept { return epochs_; }

 private:
  std::size_t patience_;
  double min_delta_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t best_epoch_ = 0;
  std::size_t since_improvement_ = 0;
  std::size_t epochs_ = 0;
};

}  // namespace permflow
