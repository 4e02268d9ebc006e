#include "permflow/losses.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include <fmt/format.h>

#include "permflow/errors.hpp"

namespace permflow {

LinearRelations LinearRelations::rescaled(std::span<const double> mins,
                                          std::span<const double> ranges) const {
  if (mins.size() != sensors() || ranges.size() != sensors()) {
    throw DimensionError(fmt::format("rescaled: {} sensors but {} mins / {} ranges", sensors(),
                                     mins.size(), ranges.size()));
  }
  LinearRelations out = *this;
  for (std::size_t r = 0; r < count(); ++r) {
    double shift = 0.0;
    for (std::size_t c = 0; c < sensors(); ++c) {
      shift += coefficients.at(r, c) * mins[c];
      out.coefficients.at(r, c) = coefficients.at(r, c) * ranges[c];
    }
    out.offsets[r] = offsets[r] - shift;
  }
  return out;
}

LinearRelations LinearRelations::reordered(std::span<const std::string> names) const {
  LinearRelations out;
  out.columns.assign(names.begin(), names.end());
  out.offsets = offsets;
  out.coefficients = DenseArray({count(), names.size()});
  std::vector<bool> used(sensors(), false);
  for (std::size_t c = 0; c < names.size(); ++c) {
    const auto it = std::find(columns.begin(), columns.end(), names[c]);
    if (it == columns.end()) continue;  // column not involved in any relation
    const auto src = static_cast<std::size_t>(it - columns.begin());
    used[src] = true;
    for (std::size_t r = 0; r < count(); ++r) out.coefficients.at(r, c) = coefficients.at(r, src);
  }
  for (std::size_t c = 0; c < sensors(); ++c) {
    if (used[c]) continue;
    for (std::size_t r = 0; r < count(); ++r) {
      if (coefficients.at(r, c) != 0.0) {
        throw DataError(fmt::format("relation uses column '{}' which the data does not have", columns[c]));
      }
    }
  }
  return out;
}

// ---- relations file --------------------------------------------------------------

void write_relations(std::ostream& out, const LinearRelations& relations) {
  out << "# permflow linear relations: coefficients per column, then offset b in A x = b\n";
  out << "columns=" << fmt::format("{}", fmt::join(relations.columns, ",")) << '\n';
  for (std::size_t r = 0; r < relations.count(); ++r) {
    for (std::size_t c = 0; c < relations.sensors(); ++c) out << fmt::format("{},", relations.coefficients.at(r, c));
    out << fmt::format("{}\n", relations.offsets[r]);
  }
}

void write_relations(const std::filesystem::path& path, const LinearRelations& relations) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(fmt::format("cannot write relations to {}", path.string()));
  write_relations(out, relations);
}

LinearRelations read_relations(std::istream& in, const std::string& source) {
  LinearRelations rel;
  std::vector<double> coeffs;
  bool have_columns = false;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    if (line.rfind("columns=", 0) == 0) {
      std::stringstream ss(line.substr(8));
      std::string name;
      while (std::getline(ss, name, ',')) rel.columns.push_back(name);
      have_columns = true;
      continue;
    }
    if (!have_columns) throw ParseError(source, lineno, "relation row before 'columns=' header");
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      double v = 0.0;
      const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (ec != std::errc() || ptr != cell.data() + cell.size()) {
        throw ParseError(source, lineno, fmt::format("cannot parse number '{}'", cell));
      }
      row.push_back(v);
    }
    if (row.size() != rel.columns.size() + 1) {
      throw ParseError(source, lineno, fmt::format("expected {} coefficients plus offset, got {} values",
                                                   rel.columns.size(), row.size()));
    }
    rel.offsets.push_back(row.back());
    coeffs.insert(coeffs.end(), row.begin(), row.end() - 1);
  }
  if (!have_columns) throw ParseError(source, lineno, "missing 'columns=' header");
  rel.coefficients = DenseArray({rel.offsets.size(), rel.columns.size()}, std::move(coeffs));
  return rel;
}

LinearRelations read_relations(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(fmt::format("cannot open relations file {}", path.string()));
  return read_relations(in, path.string());
}

// ---- penalty -------------------------------------------------------------------------

Var reference_penalty(Tape& tape, Var samples, const LinearRelations& relations) {
  const DenseArray& sv = samples.value();
  const std::size_t n = relations.sensors();
  if (sv.rank() != 2 || n == 0 || sv.cols() % n != 0) {
    throw DimensionError(fmt::format("reference_penalty: samples {} do not split into rows of {} sensors",
                                     shape_string(sv.shape()), n));
  }
  if (relations.count() == 0) return tape.constant(DenseArray::scalar(0.0));
  const std::size_t timestamps = sv.rows() * (sv.cols() / n);

  DenseArray transposed({n, relations.count()});
  for (std::size_t r = 0; r < relations.count(); ++r) {
    for (std::size_t c = 0; c < n; ++c) transposed.at(c, r) = relations.coefficients.at(r, c);
  }
  std::vector<double> neg_offsets(relations.offsets.size());
  for (std::size_t r = 0; r < neg_offsets.size(); ++r) neg_offsets[r] = -relations.offsets[r];

  Var rows = reshape(samples, {timestamps, n});
  Var residual = add_row(matmul(rows, tape.constant(std::move(transposed))),
                         tape.constant(DenseArray::vector(std::move(neg_offsets))));
  return scale(sum(square(residual)), 1.0 / static_cast<double>(timestamps));
}

double reference_penalty(const DenseArray& samples, const LinearRelations& relations) {
  Tape tape(false);
  return reference_penalty(tape, tape.constant(samples), relations).value().item();
}

void LossConfig::validate() const {
  if (!std::isfinite(physics_weight) || physics_weight < 0.0) {
    throw ConfigError(fmt::format("physics_weight must be finite and >= 0, got {}", physics_weight));
  }
  if (!std::isfinite(selfsup_weight) || selfsup_weight < 0.0) {
    throw ConfigError(fmt::format("lambda must be finite and >= 0, got {}", selfsup_weight));
  }
  if (physics_weight > 0.0 && penalty_samples == 0) {
    throw ConfigError("penalty_samples must be positive when the physics penalty is on");
  }
}

Var main_loss(Tape& tape, FlowModel& model, Var nominal_batch, PhysicsPenalty* penalty,
              const LossConfig& cfg, Rng& rng) {
  const DenseArray& xv = nominal_batch.value();
  if (xv.rank() != 2 || xv.rows() == 0) throw ContractError("main_loss: empty batch");
  Var nll = neg(mean(model.log_prob(tape, nominal_batch)));
  if (penalty == nullptr || cfg.physics_weight == 0.0) return nll;

  DenseArray draws({cfg.penalty_samples, model.dim()});
  for (double& v : draws.values()) v = rng.normal();
  Var generated = model.inverse(tape, tape.constant(std::move(draws)));
  return add(nll, scale(penalty->evaluate(tape, generated), cfg.physics_weight));
}

Var multitask_loss(Tape& tape, FlowModel& model, SelfSupHead& head, Var nominal_batch,
                   Var permuted_batch, std::span<const std::size_t> labels,
                   PhysicsPenalty* penalty, const LossConfig& cfg, Rng& rng) {
  Var main = main_loss(tape, model, nominal_batch, penalty, cfg, rng);
  if (cfg.selfsup_weight == 0.0) return main;
  Var aux = selfsup_loss(tape, model, head, permuted_batch, labels);
  return add(main, scale(aux, cfg.selfsup_weight));
}

}  // namespace permflow
