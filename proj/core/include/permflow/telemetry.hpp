#pragma once

// Telemetry tables, CSV ingestion, min-max scaling and windowing.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "permflow/diffcore.hpp"

namespace permflow {

enum class RowLabel : std::uint8_t { kNominal = 0, kFault = 1 };

std::string_view to_string(RowLabel label);

// Rectangular sensor table; every row carries a label and the identifier of
// the file it came from.
class TelemetryTable {
 public:
  TelemetryTable() = default;
  explicit TelemetryTable(std::vector<std::string> sensor_names);

  void append_row(std::span<const double> values, RowLabel label, std::string_view source);
  void append(const TelemetryTable& other);

  std::size_t rows() const noexcept { return labels_.size(); }
  std::size_t sensors() const noexcept { return names_.size(); }
  const std::vector<std::string>& sensor_names() const noexcept { return names_; }

  std::span<const double> row(std::size_t r) const {
    return std::span<const double>(values_).subspan(r * sensors(), sensors());
  }
  std::span<double> row(std::size_t r) {
    return std::span<double>(values_).subspan(r * sensors(), sensors());
  }
  double value(std::size_t r, std::size_t c) const { return values_[r * sensors() + c]; }
  RowLabel label(std::size_t r) const { return labels_[r]; }
  const std::string& source(std::size_t r) const { return sources_[source_ids_[r]]; }
  std::size_t source_index(std::size_t r) const { return source_ids_[r]; }
  // Distinct source identifiers in order of first appearance.
  const std::vector<std::string>& sources() const noexcept { return sources_; }

  std::span<const double> values() const noexcept { return values_; }
  std::span<double> values() noexcept { return values_; }

  // Rows whose source is in `keep`, preserving order.
  TelemetryTable select_sources(std::span<const std::string> keep) const;
  std::vector<std::size_t> rows_of_sources(std::span<const std::string> keep) const;

 private:
  std::vector<std::string> names_;
  std::vector<double> values_;
  std::vector<RowLabel> labels_;
  std::vector<std::size_t> source_ids_;
  std::vector<std::string> sources_;
};

// CSV with a header row. A "label" column (values nominal/fault) is
// required; an optional "file" column names the source of each row, otherwise
// the file name is used. All other columns are sensors.
TelemetryTable read_csv(std::istream& in, const std::string& source);
TelemetryTable ingest_csv(const std::filesystem::path& path);
// Writes sensors then label; with include_source a trailing "file" column.
void write_csv(std::ostream& out, const TelemetryTable& table, bool include_source = false);
void export_csv(const std::filesystem::path& path, const TelemetryTable& table,
                bool include_source = false);

// Per-column min-max scaling fitted on training rows only.
class Scaler {
 public:
  Scaler() = default;
  Scaler(std::vector<double> mins, std::vector<double> maxs);

  static Scaler fit(const TelemetryTable& table, std::span<const std::size_t> rows);
  static Scaler fit(const TelemetryTable& table);

  // (x - min) / (max - min); a constant column maps to 0.
  TelemetryTable apply(const TelemetryTable& table) const;
  TelemetryTable inverse(const TelemetryTable& table) const;

  const std::vector<double>& mins() const noexcept { return mins_; }
  const std::vector<double>& maxs() const noexcept { return maxs_; }
  std::vector<double> ranges() const;
  std::size_t sensors() const noexcept { return mins_.size(); }

 private:
  std::vector<double> mins_;
  std::vector<double> maxs_;
};

void to_json(nlohmann::json& j, const Scaler& s);
void from_json(const nlohmann::json& j, Scaler& s);

enum class Role : std::uint8_t { kTrain, kValidation, kTest };

// Windows of `length` consecutive rows flattened time-major into rows of
// `windows` ([count x length*sensors]).
struct WindowedDataset {
  std::size_t length = 0;
  std::size_t sensors = 0;
  DenseArray windows{Shape{0, 0}};
  std::vector<RowLabel> labels;
  std::vector<std::string> sources;
  std::vector<std::size_t> start_rows;
  std::size_t skipped_segments = 0;
  int split_id = -1;
  Role role = Role::kTrain;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t dim() const noexcept { return length * sensors; }
  std::size_t count(RowLabel label) const;
  std::span<const double> window(std::size_t i) const {
    return windows.values().subspan(i * dim(), dim());
  }

  WindowedDataset subset(std::span<const std::size_t> indices) const;
  WindowedDataset with_label(RowLabel label) const;
  static WindowedDataset concat(const WindowedDataset& a, const WindowedDataset& b);
};

// Windows never cross source boundaries; a window is a fault window when any
// of its rows is a fault row. Segments shorter than `length` are skipped and
// counted in skipped_segments.
WindowedDataset make_windows(const TelemetryTable& table, std::size_t length = 50,
                             std::size_t stride = 50);

}  // namespace permflow
