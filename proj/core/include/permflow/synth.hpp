#pragma once

// Synthetic spacecraft power-system telemetry: one battery feeding a bus with
// switchable resistive loads, sensor noise and injected faults.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "permflow/losses.hpp"
#include "permflow/telemetry.hpp"

namespace permflow {

struct SourceSpec {
  std::string name = "batt";
  double voltage = 24.0;
  double internal_resistance = 0.2;
  double drift_amplitude = 0.5;
  double drift_period = 300.0;  // rows
};

struct LoadSpec {
  std::string name;
  double resistance = 10.0;
  double switch_probability = 0.01;  // per row
};

struct ThermalSpec {
  double ambient = 20.0;
  double gain = 1.0;            // degrees per ampere at equilibrium
  double time_constant = 60.0;  // rows
};

enum class FaultKind { kStuckAt, kOffset, kLoadShort };

std::string to_string(FaultKind kind);
FaultKind fault_kind_from_string(const std::string& name);

// Active over rows [start, end) of one file. Sensor faults target a sensor
// name; a load short targets a load name and divides its resistance by
// `magnitude`. Offsets add `magnitude` sensor units; stuck-at holds the value
// measured at `start`.
struct FaultSpec {
  std::size_t file = 0;
  FaultKind kind = FaultKind::kOffset;
  std::string target;
  std::size_t start = 0;
  std::size_t end = 0;
  double magnitude = 0.0;
};

// Random schedule drawn per file on top of the explicit faults.
struct RandomFaultSpec {
  double file_probability = 0.5;
  std::size_t max_per_file = 1;
  std::size_t min_length = 50;
  std::size_t max_length = 150;
  // Offset size as a fraction of the sensor value at onset.
  double offset_fraction = 0.1;
  double short_factor = 3.0;
  std::vector<FaultKind> kinds{FaultKind::kStuckAt, FaultKind::kOffset, FaultKind::kLoadShort};
};

struct SynthConfig {
  std::size_t files = 12;
  std::size_t rows_per_file = 1000;
  double noise_sigma = 0.01;
  // Per-file operating point: load resistances scale by exp(spread * u),
  // source voltage by 1 + 0.1 * spread * u and ambient shifts by
  // 10 * spread * u, with u uniform in [-1, 1] per file and quantity.
  double regime_spread = 0.0;
  SourceSpec source;
  std::vector<LoadSpec> loads{{"L1", 12.0, 0.01}, {"L2", 18.0, 0.01}, {"L3", 24.0, 0.01}, {"L4", 30.0, 0.01}};
  ThermalSpec thermal;
  std::vector<FaultSpec> faults;
  std::optional<RandomFaultSpec> random_faults;

  std::vector<std::string> sensor_names() const;
  std::string file_name(std::size_t file) const;
  // Throws ConfigError on unknown targets, empty/out-of-range intervals and
  // overlapping faults on the same target.
  void validate() const;
};

void to_json(nlohmann::json& j, const SynthConfig& cfg);
void from_json(const nlohmann::json& j, SynthConfig& cfg);

struct SynthResult {
  TelemetryTable table;
  LinearRelations relations;       // exact in noise-free raw units
  std::vector<FaultSpec> faults;   // realised schedule
};

SynthResult synth_eps(const SynthConfig& config, std::uint64_t seed);

}  // namespace permflow
