#pragma once

// Reference implementations used only by the tests. They are written for
// clarity and independence from the library code, not speed.

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "permflow/diffcore.hpp"
#include "permflow/flow.hpp"
#include "permflow/selfsup.hpp"

namespace oracle {

// Central difference of f with respect to each entry of x.
std::vector<double> numeric_gradient(const std::function<double()>& f, std::span<double> x, double eps = 1e-5);

// |a - n| / max(|a|, |n|, floor); the floor keeps near-zero components
// from turning rounding noise into huge ratios.
double max_relative_error(std::span<const double> analytic, std::span<const double> numeric, double floor = 1e-3);

// The set score written exactly as the double sum over ordered pairs
// i != j plus the displacement of every member from the identity.
long long set_score(const std::vector<std::vector<int>>& perms);

struct SweepResult {
  double auroc = 0.0;
  double fpr95 = 0.0;
  double f1 = 0.0;
  double average_precision = 0.0;
};

// AUROC by counting every (positive, negative) pair; FPR95, F1 and AP by
// recounting the confusion matrix from scratch at every distinct threshold.
SweepResult sweep_metrics(const std::vector<double>& scores, const std::vector<bool>& positive);

// log|det J| of y = layer(x) for a single row, with J from central differences
// and the determinant from an LU factorisation.
double jacobian_log_det(permflow::CouplingLayer& layer, const std::vector<double>& x, double eps = 1e-6);

// Midpoint-rule integral of exp(log_prob) over [-half, half]^2.
double integrate_density_2d(permflow::FlowModel& model, double half, std::size_t cells_per_axis);

}  // namespace oracle
