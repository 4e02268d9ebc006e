#pragma once

// Real NVP density model over flattened telemetry windows.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "permflow/diffcore.hpp"

namespace permflow {

enum class Activation { kLinear, kTanh };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& name);

// Fully-connected layer, weight stored [in x out].
struct DenseLayer {
  Parameter weight;
  Parameter bias;
  Activation activation = Activation::kLinear;

  std::size_t in_features() const { return weight.value.rows(); }
  std::size_t out_features() const { return weight.value.cols(); }
  Var forward(Tape& tape, Var x);
};

class Mlp {
 public:
  Mlp() = default;
  explicit Mlp(std::vector<DenseLayer> layers) : layers_(std::move(layers)) {}

  Var forward(Tape& tape, Var x);
  std::vector<DenseLayer>& layers() { return layers_; }
  const std::vector<DenseLayer>& layers() const { return layers_; }
  std::size_t out_features() const { return layers_.back().out_features(); }
  void collect(std::vector<Parameter*>& out);

 private:
  std::vector<DenseLayer> layers_;
};

struct FlowConfig {
  std::size_t input_dim = 0;
  std::size_t num_layers = 4;
  std::size_t hidden_units = 32;
  std::size_t hidden_layers = 2;
  // s-networks squash with tanh throughout, t-networks stay linear.
  Activation scale_hidden = Activation::kTanh;
  Activation scale_output = Activation::kTanh;
  Activation shift_hidden = Activation::kLinear;
  Activation shift_output = Activation::kLinear;
  // Zero final layers make the untrained flow the identity map.
  bool zero_init_output = true;
};

struct CouplingResult {
  Var y;
  Var log_det;  // one entry per row
};

// Leaves coordinates with mask 1 unchanged and maps the others to
// x * exp(s(x_masked)) + t(x_masked).
class CouplingLayer {
 public:
  CouplingLayer() = default;
  CouplingLayer(std::vector<double> mask, Mlp scale_net, Mlp shift_net);

  // x is [batch x d].
  CouplingResult forward(Tape& tape, Var x);
  Var inverse(Tape& tape, Var y);

  std::size_t dim() const { return mask_.size(); }
  const std::vector<double>& mask() const { return mask_; }
  Mlp& scale_net() { return scale_net_; }
  Mlp& shift_net() { return shift_net_; }
  const Mlp& scale_net() const { return scale_net_; }
  const Mlp& shift_net() const { return shift_net_; }
  void collect(std::vector<Parameter*>& out);

 private:
  struct Terms {
    Var s;
    Var t;
  };
  Terms scale_shift(Tape& tape, Var fixed_part);

  std::vector<double> mask_;
  Mlp scale_net_;
  Mlp shift_net_;
};

struct LatentBatch {
  Var z;
  Var log_det;
};

class FlowModel {
 public:
  FlowModel() = default;
  // Masks alternate between even and odd coordinates starting with even.
  FlowModel(const FlowConfig& config, std::uint64_t seed);
  explicit FlowModel(std::vector<CouplingLayer> layers);

  LatentBatch forward(Tape& tape, Var x);
  Var inverse(Tape& tape, Var z);
  // log N(z; 0, I) + sum of log-dets, one entry per row of x.
  Var log_prob(Tape& tape, Var x);

  // Inference helpers on plain arrays; x is [batch x d].
  std::vector<double> log_prob(const DenseArray& x);
  DenseArray transform(const DenseArray& x);
  DenseArray inverse(const DenseArray& z);
  DenseArray sample(std::size_t count, std::uint64_t seed);

  std::size_t dim() const { return layers_.empty() ? 0 : layers_.front().dim(); }
  std::size_t num_layers() const { return layers_.size(); }
  std::vector<CouplingLayer>& layers() { return layers_; }
  const std::vector<CouplingLayer>& layers() const { return layers_; }

  std::vector<Parameter*> parameters();

 private:
  std::vector<CouplingLayer> layers_;
};

// Standard normal log-density per row of z ([batch x d]).
Var standard_normal_log_density(Tape& tape, Var z);

// Builds a dense layer with uniform fan-in initialisation.
DenseLayer make_dense(const std::string& name, std::size_t in, std::size_t out,
                      Activation activation, std::uint64_t seed, bool zero);

std::vector<double> alternating_mask(std::size_t dim, bool even);

}  // namespace permflow
