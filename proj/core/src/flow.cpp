#include "permflow/flow.hpp"

#include <cmath>
#include <numbers>

#include <fmt/format.h>

#include "permflow/errors.hpp"
#include "permflow/random.hpp"

namespace permflow {

std::string to_string(Activation a) { return a == Activation::kTanh ? "tanh" : "linear"; }

Activation activation_from_string(const std::string& name) {
  if (name == "tanh") return Activation::kTanh;
  if (name == "linear") return Activation::kLinear;
  throw ConfigError(fmt::format("unknown activation '{}'", name));
}

Var DenseLayer::forward(Tape& tape, Var x) {
  Var h = add_row(matmul(x, tape.param(weight)), tape.param(bias));
  return activation == Activation::kTanh ? tanh(h) : h;
}

Var Mlp::forward(Tape& tape, Var x) {
  for (DenseLayer& layer : layers_) x = layer.forward(tape, x);
  return x;
}

void Mlp::collect(std::vector<Parameter*>& out) {
  for (DenseLayer& layer : layers_) {
    out.push_back(&layer.weight);
    out.push_back(&layer.bias);
  }
}

DenseLayer make_dense(const std::string& name, std::size_t in, std::size_t out,
                      Activation activation, std::uint64_t seed, bool zero) {
  DenseArray w({in, out});
  if (!zero) {
    Rng rng(seed);
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    for (double& v : w.values()) v = rng.uniform(-bound, bound);
  }
  DenseLayer layer;
  layer.weight = Parameter(name + ".weight", std::move(w));
  layer.bias = Parameter(name + ".bias", DenseArray({out}));
  layer.activation = activation;
  return layer;
}

std::vector<double> alternating_mask(std::size_t dim, bool even) {
  std::vector<double> mask(dim);
  for (std::size_t i = 0; i < dim; ++i) mask[i] = ((i % 2 == 0) == even) ? 1.0 : 0.0;
  return mask;
}

// ---- coupling ----------------------------------------------------------------

namespace {

void require_finite(const DenseArray& x, const char* where) {
  if (!x.all_finite()) throw NumericError(fmt::format("{}: non-finite input", where));
}

Mlp make_net(const std::string& prefix, const FlowConfig& cfg, Activation hidden,
             Activation output, std::uint64_t seed) {
  std::vector<DenseLayer> layers;
  std::size_t in = cfg.input_dim;
  for (std::size_t h = 0; h < cfg.hidden_layers; ++h) {
    layers.push_back(make_dense(fmt::format("{}.{}", prefix, h), in, cfg.hidden_units, hidden,
                                derive_seed(seed, h), false));
    in = cfg.hidden_units;
  }
  layers.push_back(make_dense(fmt::format("{}.{}", prefix, cfg.hidden_layers), in,
                              cfg.input_dim, output, derive_seed(seed, cfg.hidden_layers),
                              cfg.zero_init_output));
  return Mlp(std::move(layers));
}

}  // namespace

CouplingLayer::CouplingLayer(std::vector<double> mask, Mlp scale_net, Mlp shift_net)
    : mask_(std::move(mask)), scale_net_(std::move(scale_net)), shift_net_(std::move(shift_net)) {
  bool has_zero = false, has_one = false;
  for (const double m : mask_) {
    if (m == 0.0) {
      has_zero = true;
    } else if (m == 1.0) {
      has_one = true;
    } else {
      throw ContractError("coupling mask must be 0/1 valued");
    }
  }
  if (!has_zero || !has_one) throw ContractError("coupling mask must contain both 0 and 1");
  if (scale_net_.out_features() != mask_.size() || shift_net_.out_features() != mask_.size()) {
    throw DimensionError(fmt::format("coupling nets must output {} values", mask_.size()));
  }
}

CouplingLayer::Terms CouplingLayer::scale_shift(Tape& tape, Var fixed_part) {
  std::vector<double> inverse_mask(mask_.size());
  for (std::size_t i = 0; i < mask_.size(); ++i) inverse_mask[i] = 1.0 - mask_[i];
  Var free_coords = tape.constant(DenseArray::vector(std::move(inverse_mask)));
  Var s = mul_row(scale_net_.forward(tape, fixed_part), free_coords);
  Var t = mul_row(shift_net_.forward(tape, fixed_part), free_coords);
  return {s, t};
}

CouplingResult CouplingLayer::forward(Tape& tape, Var x) {
  require_finite(x.value(), "coupling_forward");
  Var fixed = mul_row(x, tape.constant(DenseArray::vector(mask_)));
  auto [s, t] = scale_shift(tape, fixed);
  // s and t vanish on fixed coordinates, so those pass through exactly.
  Var y = add(mul(x, exp(s)), t);
  return {y, row_sum(s)};
}

Var CouplingLayer::inverse(Tape& tape, Var y) {
  require_finite(y.value(), "coupling_inverse");
  Var fixed = mul_row(y, tape.constant(DenseArray::vector(mask_)));
  auto [s, t] = scale_shift(tape, fixed);
  return mul(sub(y, t), exp(neg(s)));
}

void CouplingLayer::collect(std::vector<Parameter*>& out) {
  scale_net_.collect(out);
  shift_net_.collect(out);
}

// ---- model -------------------------------------------------------------------

FlowModel::FlowModel(const FlowConfig& config, std::uint64_t seed) {
  if (config.input_dim < 2) throw ContractError("flow input dimension must be at least 2");
  if (config.num_layers == 0) throw ContractError("flow needs at least one coupling layer");
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    const std::uint64_t layer_seed = derive_seed(seed, l);
    layers_.emplace_back(
        alternating_mask(config.input_dim, l % 2 == 0),
        make_net(fmt::format("coupling{}.s", l), config, config.scale_hidden, config.scale_output,
                 derive_seed(layer_seed, "s")),
        make_net(fmt::format("coupling{}.t", l), config, config.shift_hidden, config.shift_output,
                 derive_seed(layer_seed, "t")));
  }
}

FlowModel::FlowModel(std::vector<CouplingLayer> layers) : layers_(std::move(layers)) {
  if (layers_.empty()) throw ContractError("flow needs at least one coupling layer");
  for (const CouplingLayer& layer : layers_) {
    if (layer.dim() != layers_.front().dim()) {
      throw DimensionError("all coupling layers must share the input dimension");
    }
  }
}

LatentBatch FlowModel::forward(Tape& tape, Var x) {
  if (x.value().rank() != 2 || x.value().cols() != dim()) {
    throw DimensionError(fmt::format("flow expects [batch x {}], got {}", dim(),
                                     shape_string(x.value().shape())));
  }
  Var log_det;
  for (CouplingLayer& layer : layers_) {
    CouplingResult r = layer.forward(tape, x);
    x = r.y;
    log_det = log_det.valid() ? add(log_det, r.log_det) : r.log_det;
  }
  return {x, log_det};
}

Var FlowModel::inverse(Tape& tape, Var z) {
  if (z.value().rank() != 2 || z.value().cols() != dim()) {
    throw DimensionError(fmt::format("flow expects [batch x {}], got {}", dim(),
                                     shape_string(z.value().shape())));
  }
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) z = it->inverse(tape, z);
  return z;
}

Var standard_normal_log_density(Tape& tape, Var z) {
  const double d = static_cast<double>(z.value().cols());
  const double log_norm = -0.5 * d * std::log(2.0 * std::numbers::pi);
  return add(scale(row_sum(square(z)), -0.5), tape.constant(DenseArray::scalar(log_norm)));
}

Var FlowModel::log_prob(Tape& tape, Var x) {
  LatentBatch latent = forward(tape, x);
  return add(standard_normal_log_density(tape, latent.z), latent.log_det);
}

std::vector<double> FlowModel::log_prob(const DenseArray& x) {
  Tape tape(false);
  Var lp = log_prob(tape, tape.constant(x));
  const auto v = lp.value().values();
  return {v.begin(), v.end()};
}

DenseArray FlowModel::transform(const DenseArray& x) {
  Tape tape(false);
  return forward(tape, tape.constant(x)).z.value();
}

DenseArray FlowModel::inverse(const DenseArray& z) {
  Tape tape(false);
  return inverse(tape, tape.constant(z)).value();
}

DenseArray FlowModel::sample(std::size_t count, std::uint64_t seed) {
  if (count == 0) throw ContractError("sample: count must be at least 1");
  Rng rng(seed);
  DenseArray z({count, dim()});
  for (double& v : z.values()) v = rng.normal();
  return inverse(z);
}

std::vector<Parameter*> FlowModel::parameters() {
  std::vector<Parameter*> out;
  for (CouplingLayer& layer : layers_) layer.collect(out);
  return out;
}

}  // namespace permflow
