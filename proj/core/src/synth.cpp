#include "permflow/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <fmt/format.h>

#include "permflow/errors.hpp"
#include "permflow/random.hpp"

namespace permflow {

std::string to_string(FaultKind kind) {
  switch (kind) {
    case FaultKind::kStuckAt: return "stuck_at";
    case FaultKind::kOffset: return "offset";
    case FaultKind::kLoadShort: return "load_short";
  }
  return "unknown";
}

FaultKind fault_kind_from_string(const std::string& name) {
  if (name == "stuck_at") return FaultKind::kStuckAt;
  if (name == "offset") return FaultKind::kOffset;
  if (name == "load_short") return FaultKind::kLoadShort;
  throw ConfigError(fmt::format("unknown fault kind '{}'", name));
}

std::vector<std::string> SynthConfig::sensor_names() const {
  std::vector<std::string> names{"V_" + source.name, "I_" + source.name, "V_bus"};
  for (const LoadSpec& load : loads) names.push_back("I_" + load.name);
  names.push_back("T_" + source.name);
  return names;
}

std::string SynthConfig::file_name(std::size_t file) const { return fmt::format("eps_{:03d}", file); }

namespace {

bool overlaps(const FaultSpec& a, const FaultSpec& b) {
  return a.file == b.file && a.target == b.target && a.start < b.end && b.start < a.end;
}

void check_fault(const SynthConfig& cfg, const FaultSpec& f) {
  if (f.file >= cfg.files) throw ConfigError(fmt::format("fault targets file {} but only {} files", f.file, cfg.files));
  if (f.start >= f.end || f.end > cfg.rows_per_file) {
    throw ConfigError(fmt::format("fault on '{}' has invalid interval [{}, {})", f.target, f.start, f.end));
  }
  if (f.kind == FaultKind::kLoadShort) {
    const bool known = std::any_of(cfg.loads.begin(), cfg.loads.end(), [&](const LoadSpec& l) { return l.name == f.target; });
    if (!known) throw ConfigError(fmt::format("load_short targets unknown load '{}'", f.target));
    if (!(f.magnitude > 1.0)) throw ConfigError("load_short magnitude must be > 1 (resistance divisor)");
  } else {
    const auto names = cfg.sensor_names();
    if (std::find(names.begin(), names.end(), f.target) == names.end()) {
      throw ConfigError(fmt::format("{} targets unknown sensor '{}'", to_string(f.kind), f.target));
    }
  }
}

}  // namespace

void SynthConfig::validate() const {
  if (files == 0 || rows_per_file == 0) throw ConfigError("synth: files and rows_per_file must be positive");
  if (loads.empty()) throw ConfigError("synth: at least one load is required");
  if (!(noise_sigma >= 0.0)) throw ConfigError("synth: noise_sigma must be >= 0");
  if (!(regime_spread >= 0.0 && regime_spread < 5.0)) throw ConfigError("synth: regime_spread must be in [0, 5)");
  if (!(source.internal_resistance >= 0.0)) throw ConfigError("synth: internal_resistance must be >= 0");
  if (!(source.drift_period > 0.0)) throw ConfigError("synth: drift_period must be positive");
  if (!(thermal.time_constant >= 1.0)) throw ConfigError("synth: thermal time_constant must be >= 1 row");
  for (const LoadSpec& l : loads) {
    if (!(l.resistance > 0.0)) throw ConfigError(fmt::format("synth: load '{}' needs positive resistance", l.name));
    if (!(l.switch_probability >= 0.0 && l.switch_probability <= 1.0)) {
      throw ConfigError(fmt::format("synth: load '{}' switch_probability outside [0, 1]", l.name));
    }
  }
  for (std::size_t i = 0; i < faults.size(); ++i) {
    check_fault(*this, faults[i]);
    for (std::size_t j = 0; j < i; ++j) {
      if (overlaps(faults[i], faults[j])) {
        throw ConfigError(fmt::format("overlapping faults on '{}' in file {}: [{}, {}) and [{}, {})", faults[i].target,
                                      faults[i].file, faults[j].start, faults[j].end, faults[i].start, faults[i].end));
      }
    }
  }
  if (random_faults) {
    const RandomFaultSpec& r = *random_faults;
    if (!(r.file_probability >= 0.0 && r.file_probability <= 1.0)) throw ConfigError("random_faults.file_probability outside [0, 1]");
    if (r.min_length == 0 || r.min_length > r.max_length || r.max_length > rows_per_file) {
      throw ConfigError("random_faults: need 0 < min_length <= max_length <= rows_per_file");
    }
    if (r.kinds.empty()) throw ConfigError("random_faults.kinds is empty");
    if (!(r.short_factor > 1.0)) throw ConfigError("random_faults.short_factor must be > 1");
  }
}

// ---- JSON -------------------------------------------------------------------------

void to_json(nlohmann::json& j, const SynthConfig& cfg) {
  j = nlohmann::json{
      {"files", cfg.files},
      {"rows_per_file", cfg.rows_per_file},
      {"noise_sigma", cfg.noise_sigma},
      {"regime_spread", cfg.regime_spread},
      {"source", {{"name", cfg.source.name}, {"voltage", cfg.source.voltage},
                  {"internal_resistance", cfg.source.internal_resistance},
                  {"drift_amplitude", cfg.source.drift_amplitude}, {"drift_period", cfg.source.drift_period}}},
      {"thermal", {{"ambient", cfg.thermal.ambient}, {"gain", cfg.thermal.gain},
                   {"time_constant", cfg.thermal.time_constant}}},
      {"loads", nlohmann::json::array()},
      {"faults", nlohmann::json::array()}};
  for (const LoadSpec& l : cfg.loads) {
    j["loads"].push_back({{"name", l.name}, {"resistance", l.resistance}, {"switch_probability", l.switch_probability}});
  }
  for (const FaultSpec& f : cfg.faults) {
    j["faults"].push_back({{"file", f.file}, {"kind", to_string(f.kind)}, {"target", f.target},
                           {"start", f.start}, {"end", f.end}, {"magnitude", f.magnitude}});
  }
  if (cfg.random_faults) {
    const RandomFaultSpec& r = *cfg.random_faults;
    std::vector<std::string> kinds;
    for (const FaultKind k : r.kinds) kinds.push_back(to_string(k));
    j["random_faults"] = {{"file_probability", r.file_probability}, {"max_per_file", r.max_per_file},
                          {"min_length", r.min_length}, {"max_length", r.max_length},
                          {"offset_fraction", r.offset_fraction}, {"short_factor", r.short_factor},
                          {"kinds", kinds}};
  }
}

void from_json(const nlohmann::json& j, SynthConfig& cfg) {
  cfg = SynthConfig{};
  cfg.files = j.value("files", cfg.files);
  cfg.rows_per_file = j.value("rows_per_file", cfg.rows_per_file);
  cfg.noise_sigma = j.value("noise_sigma", cfg.noise_sigma);
  cfg.regime_spread = j.value("regime_spread", cfg.regime_spread);
  if (j.contains("source")) {
    const auto& s = j["source"];
    cfg.source.name = s.value("name", cfg.source.name);
    cfg.source.voltage = s.value("voltage", cfg.source.voltage);
    cfg.source.internal_resistance = s.value("internal_resistance", cfg.source.internal_resistance);
    cfg.source.drift_amplitude = s.value("drift_amplitude", cfg.source.drift_amplitude);
    cfg.source.drift_period = s.value("drift_period", cfg.source.drift_period);
  }
  if (j.contains("thermal")) {
    const auto& t = j["thermal"];
    cfg.thermal.ambient = t.value("ambient", cfg.thermal.ambient);
    cfg.thermal.gain = t.value("gain", cfg.thermal.gain);
    cfg.thermal.time_constant = t.value("time_constant", cfg.thermal.time_constant);
  }
  if (j.contains("loads")) {
    cfg.loads.clear();
    for (const auto& l : j["loads"]) {
      cfg.loads.push_back({l.at("name").get<std::string>(), l.value("resistance", 10.0), l.value("switch_probability", 0.01)});
    }
  }
  for (const auto& f : j.value("faults", nlohmann::json::array())) {
    cfg.faults.push_back({f.at("file").get<std::size_t>(), fault_kind_from_string(f.at("kind").get<std::string>()),
                          f.at("target").get<std::string>(), f.at("start").get<std::size_t>(),
                          f.at("end").get<std::size_t>(), f.value("magnitude", 0.0)});
  }
  if (j.contains("random_faults") && !j["random_faults"].is_null()) {
    const auto& r = j["random_faults"];
    RandomFaultSpec spec;
    spec.file_probability = r.value("file_probability", spec.file_probability);
    spec.max_per_file = r.value("max_per_file", spec.max_per_file);
    spec.min_length = r.value("min_length", spec.min_length);
    spec.max_length = r.value("max_length", spec.max_length);
    spec.offset_fraction = r.value("offset_fraction", spec.offset_fraction);
    spec.short_factor = r.value("short_factor", spec.short_factor);
    if (r.contains("kinds")) {
      spec.kinds.clear();
      for (const auto& k : r["kinds"]) spec.kinds.push_back(fault_kind_from_string(k.get<std::string>()));
    }
    cfg.random_faults = spec;
  }
}

// ---- generator ---------------------------------------------------------------------------

namespace {

struct PlannedFault {
  FaultSpec spec;
  bool relative_offset = false;  // magnitude is a fraction of the onset value
};

std::vector<PlannedFault> draw_random_faults(const SynthConfig& cfg, std::size_t file,
                                             const std::vector<PlannedFault>& fixed, Rng& rng) {
  std::vector<PlannedFault> out;
  const RandomFaultSpec& r = *cfg.random_faults;
  if (rng.uniform01() >= r.file_probability) return out;
  const auto sensors = cfg.sensor_names();
  const std::size_t wanted = 1 + static_cast<std::size_t>(rng.uniform_index(r.max_per_file));
  for (std::size_t i = 0; i < wanted; ++i) {
    for (int attempt = 0; attempt < 10; ++attempt) {
      PlannedFault f;
      f.spec.file = file;
      f.spec.kind = r.kinds[rng.uniform_index(r.kinds.size())];
      const std::size_t length = r.min_length + rng.uniform_index(r.max_length - r.min_length + 1);
      f.spec.start = rng.uniform_index(cfg.rows_per_file - length + 1);
      f.spec.end = f.spec.start + length;
      if (f.spec.kind == FaultKind::kLoadShort) {
        f.spec.target = cfg.loads[rng.uniform_index(cfg.loads.size())].name;
        f.spec.magnitude = r.short_factor;
      } else {
        f.spec.target = sensors[rng.uniform_index(sensors.size())];
        if (f.spec.kind == FaultKind::kOffset) {
          f.spec.magnitude = (rng.uniform01() < 0.5 ? -1.0 : 1.0) * r.offset_fraction;
          f.relative_offset = true;
        }
      }
      const auto clash = [&](const PlannedFault& other) { return overlaps(f.spec, other.spec); };
      if (std::any_of(fixed.begin(), fixed.end(), clash) || std::any_of(out.begin(), out.end(), clash)) continue;
      out.push_back(f);
      break;
    }
  }
  return out;
}

}  // namespace

SynthResult synth_eps(const SynthConfig& config, std::uint64_t seed) {
  config.validate();
  const auto names = config.sensor_names();
  const std::size_t n = names.size();
  const std::size_t loads = config.loads.size();
  const std::size_t temp_col = n - 1;

  SynthResult result;
  result.table = TelemetryTable(names);

  // Kirchhoff current law at the bus and the battery terminal equation:
  //   I_src - sum_k I_k = 0,   V_bus - V_src + R_int * I_src = 0.
  result.relations.columns = names;
  result.relations.coefficients = DenseArray({2, n});
  result.relations.offsets = {0.0, 0.0};
  result.relations.coefficients.at(0, 1) = 1.0;
  for (std::size_t k = 0; k < loads; ++k) result.relations.coefficients.at(0, 3 + k) = -1.0;
  result.relations.coefficients.at(1, 2) = 1.0;
  result.relations.coefficients.at(1, 0) = -1.0;
  result.relations.coefficients.at(1, 1) = config.source.internal_resistance;

  std::vector<double> truth(n), measured(n);
  for (std::size_t file = 0; file < config.files; ++file) {
    Rng rng(derive_seed(seed, file));
    Rng fault_rng(derive_seed(derive_seed(seed, "faults"), file));

    std::vector<PlannedFault> planned;
    for (const FaultSpec& f : config.faults) {
      if (f.file == file) planned.push_back({f, false});
    }
    if (config.random_faults) {
      auto extra = draw_random_faults(config, file, planned, fault_rng);
      planned.insert(planned.end(), extra.begin(), extra.end());
    }

    // Own stream, so a zero spread leaves every other draw untouched.
    Rng regime_rng(derive_seed(derive_seed(seed, "regime"), file));
    const double spread = config.regime_spread;
    std::vector<double> base_resistance(loads);
    for (std::size_t k = 0; k < loads; ++k) {
      base_resistance[k] = config.loads[k].resistance * std::exp(spread * regime_rng.uniform(-1.0, 1.0));
    }
    const double voltage = config.source.voltage * (1.0 + 0.1 * spread * regime_rng.uniform(-1.0, 1.0));
    const double ambient = config.thermal.ambient + 10.0 * spread * regime_rng.uniform(-1.0, 1.0);

    const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    std::vector<bool> on(loads);
    for (std::size_t k = 0; k < loads; ++k) on[k] = rng.uniform01() < 0.5;
    double temperature = ambient;
    std::vector<double> held(planned.size(), 0.0);
    const std::string source_name = config.file_name(file);

    for (std::size_t row = 0; row < config.rows_per_file; ++row) {
      for (std::size_t k = 0; k < loads; ++k) {
        if (rng.uniform01() < config.loads[k].switch_probability) on[k] = !on[k];
      }
      const double v_src = voltage +
                           config.source.drift_amplitude *
                               std::sin(2.0 * std::numbers::pi * static_cast<double>(row) / config.source.drift_period + phase);
      std::vector<double> resistance(loads);
      for (std::size_t k = 0; k < loads; ++k) resistance[k] = base_resistance[k];
      bool fault_row = false;
      for (const PlannedFault& f : planned) {
        if (row < f.spec.start || row >= f.spec.end) continue;
        fault_row = true;
        if (f.spec.kind != FaultKind::kLoadShort) continue;
        for (std::size_t k = 0; k < loads; ++k) {
          if (config.loads[k].name == f.spec.target) resistance[k] /= f.spec.magnitude;
        }
      }

      double conductance = 0.0;
      for (std::size_t k = 0; k < loads; ++k) {
        if (on[k]) conductance += 1.0 / resistance[k];
      }
      const double v_bus = v_src / (1.0 + config.source.internal_resistance * conductance);
      double i_src = 0.0;
      for (std::size_t k = 0; k < loads; ++k) {
        truth[3 + k] = on[k] ? v_bus / resistance[k] : 0.0;
        i_src += truth[3 + k];
      }
      const double alpha = 1.0 / config.thermal.time_constant;
      temperature += alpha * (ambient + config.thermal.gain * i_src - temperature);
      truth[0] = v_src;
      truth[1] = i_src;
      truth[2] = v_src - config.source.internal_resistance * i_src;
      truth[temp_col] = temperature;

      for (std::size_t c = 0; c < n; ++c) measured[c] = truth[c] + config.noise_sigma * rng.normal();

      for (std::size_t i = 0; i < planned.size(); ++i) {
        PlannedFault& f = planned[i];
        if (f.spec.kind == FaultKind::kLoadShort || row < f.spec.start || row >= f.spec.end) continue;
        const auto col = static_cast<std::size_t>(std::find(names.begin(), names.end(), f.spec.target) - names.begin());
        if (f.spec.kind == FaultKind::kStuckAt) {
          if (row == f.spec.start) held[i] = measured[col];
          measured[col] = held[i];
        } else {
          if (row == f.spec.start && f.relative_offset) {
            f.spec.magnitude *= std::max(std::abs(measured[col]), 1e-3);
            f.relative_offset = false;
          }
          measured[col] += f.spec.magnitude;
        }
      }
      result.table.append_row(measured, fault_row ? RowLabel::kFault : RowLabel::kNominal, source_name);
    }
    for (const PlannedFault& f : planned) result.faults.push_back(f.spec);
  }
  return result;
}

}  // namespace permflow
