#include "permflow/telemetry.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <unordered_map>
#include <unordered_set>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "permflow/errors.hpp"

namespace permflow {

std::string_view to_string(RowLabel label) {
  return label == RowLabel::kFault ? "fault" : "nominal";
}

TelemetryTable::TelemetryTable(std::vector<std::string> sensor_names)
    : names_(std::move(sensor_names)) {}

void TelemetryTable::append_row(std::span<const double> values, RowLabel label,
                                std::string_view source) {
  if (values.size() != sensors()) {
    throw DimensionError(fmt::format("row has {} values, table has {} sensors", values.size(), sensors()));
  }
  values_.insert(values_.end(), values.begin(), values.end());
  labels_.push_back(label);
  // Rows arrive grouped by source, so checking the last id first is the fast path.
  if (!source_ids_.empty() && sources_[source_ids_.back()] == source) {
    source_ids_.push_back(source_ids_.back());
    return;
  }
  const auto it = std::find(sources_.begin(), sources_.end(), source);
  if (it == sources_.end()) {
    sources_.emplace_back(source);
    source_ids_.push_back(sources_.size() - 1);
  } else {
    source_ids_.push_back(static_cast<std::size_t>(it - sources_.begin()));
  }
}

void TelemetryTable::append(const TelemetryTable& other) {
  if (other.sensor_names() != names_) throw DimensionError("append: sensor columns differ");
  for (std::size_t r = 0; r < other.rows(); ++r) append_row(other.row(r), other.label(r), other.source(r));
}

std::vector<std::size_t> TelemetryTable::rows_of_sources(std::span<const std::string> keep) const {
  std::vector<bool> wanted(sources_.size(), false);
  for (std::size_t s = 0; s < sources_.size(); ++s) {
    wanted[s] = std::find(keep.begin(), keep.end(), sources_[s]) != keep.end();
  }
  std::vector<std::size_t> rows;
  for (std::size_t r = 0; r < this->rows(); ++r) {
    if (wanted[source_ids_[r]]) rows.push_back(r);
  }
  return rows;
}

TelemetryTable TelemetryTable::select_sources(std::span<const std::string> keep) const {
  TelemetryTable out(names_);
  for (const std::size_t r : rows_of_sources(keep)) out.append_row(row(r), label(r), source(r));
  return out;
}

// ---- CSV ----------------------------------------------------------------------

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

std::vector<std::string_view> split_cells(std::string_view line) {
  std::vector<std::string_view> cells;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    cells.push_back(trim(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return cells;
}

}  // namespace

TelemetryTable read_csv(std::istream& in, const std::string& source) {
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!trim(line).empty()) break;
  }
  if (trim(line).empty()) throw ParseError(source, lineno, "missing header row");

  const auto header = split_cells(line);
  std::size_t label_col = header.size(), file_col = header.size();
  std::vector<std::string> names;
  std::vector<std::size_t> sensor_cols;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (header[c] == "label") {
      label_col = c;
    } else if (header[c] == "file") {
      file_col = c;
    } else {
      if (header[c].empty()) throw ParseError(source, lineno, fmt::format("empty column name at position {}", c + 1));
      names.emplace_back(header[c]);
      sensor_cols.push_back(c);
    }
  }
  if (label_col == header.size()) throw ParseError(source, lineno, "missing 'label' column");
  if (names.empty()) throw ParseError(source, lineno, "no sensor columns");

  const std::string default_source = std::filesystem::path(source).filename().string();
  TelemetryTable table(names);
  std::vector<double> values(names.size());
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const auto cells = split_cells(line);
    if (cells.size() != header.size()) {
      throw ParseError(source, lineno, fmt::format("ragged row: expected {} cells, got {}", header.size(), cells.size()));
    }
    for (std::size_t i = 0; i < sensor_cols.size(); ++i) {
      const std::string_view cell = cells[sensor_cols[i]];
      double v = 0.0;
      const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (ec != std::errc() || ptr != cell.data() + cell.size() || cell.empty() || !std::isfinite(v)) {
        throw ParseError(source, lineno, fmt::format("column '{}': cannot parse '{}' as a finite number", names[i], cell));
      }
      values[i] = v;
    }
    RowLabel label;
    if (cells[label_col] == "nominal") {
      label = RowLabel::kNominal;
    } else if (cells[label_col] == "fault") {
      label = RowLabel::kFault;
    } else {
      throw ParseError(source, lineno, fmt::format("label must be 'nominal' or 'fault', got '{}'", cells[label_col]));
    }
    const std::string_view row_source = file_col < header.size() ? cells[file_col] : std::string_view(default_source);
    table.append_row(values, label, row_source);
  }
  return table;
}

TelemetryTable ingest_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(fmt::format("cannot open CSV file {}", path.string()));
  return read_csv(in, path.string());
}

void write_csv(std::ostream& out, const TelemetryTable& table, bool include_source) {
  out << fmt::format("{},label", fmt::join(table.sensor_names(), ","));
  out << (include_source ? ",file\n" : "\n");
  fmt::memory_buffer buf;
  for (std::size_t r = 0; r < table.rows(); ++r) {
    buf.clear();
    for (const double v : table.row(r)) fmt::format_to(std::back_inserter(buf), "{},", v);
    fmt::format_to(std::back_inserter(buf), "{}", to_string(table.label(r)));
    if (include_source) fmt::format_to(std::back_inserter(buf), ",{}", table.source(r));
    buf.push_back('\n');
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  }
}

void export_csv(const std::filesystem::path& path, const TelemetryTable& table, bool include_source) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(fmt::format("cannot write CSV file {}", path.string()));
  write_csv(out, table, include_source);
}

// ---- scaling ----------------------------------------------------------------------

Scaler::Scaler(std::vector<double> mins, std::vector<double> maxs)
    : mins_(std::move(mins)), maxs_(std::move(maxs)) {
  if (mins_.size() != maxs_.size()) throw DimensionError("scaler: min and max vectors differ in length");
  for (std::size_t c = 0; c < mins_.size(); ++c) {
    if (!(maxs_[c] >= mins_[c])) throw ContractError(fmt::format("scaler: column {} has max < min", c));
  }
}

Scaler Scaler::fit(const TelemetryTable& table, std::span<const std::size_t> rows) {
  if (rows.empty()) throw ContractError("fit_scale: no training rows");
  const std::size_t n = table.sensors();
  std::vector<double> lo(n, std::numeric_limits<double>::infinity());
  std::vector<double> hi(n, -std::numeric_limits<double>::infinity());
  for (const std::size_t r : rows) {
    const auto values = table.row(r);
    for (std::size_t c = 0; c < n; ++c) {
      lo[c] = std::min(lo[c], values[c]);
      hi[c] = std::max(hi[c], values[c]);
    }
  }
  return Scaler(std::move(lo), std::move(hi));
}

Scaler Scaler::fit(const TelemetryTable& table) {
  std::vector<std::size_t> rows(table.rows());
  for (std::size_t r = 0; r < rows.size(); ++r) rows[r] = r;
  return fit(table, rows);
}

std::vector<double> Scaler::ranges() const {
  std::vector<double> out(mins_.size());
  for (std::size_t c = 0; c < out.size(); ++c) out[c] = maxs_[c] - mins_[c];
  return out;
}

TelemetryTable Scaler::apply(const TelemetryTable& table) const {
  if (table.sensors() != sensors()) {
    throw DimensionError(fmt::format("scaler fitted on {} sensors, table has {}", sensors(), table.sensors()));
  }
  TelemetryTable out = table;
  const std::size_t n = sensors();
  auto values = out.values();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const std::size_t c = i % n;
    const double range = maxs_[c] - mins_[c];
    values[i] = range > 0.0 ? (values[i] - mins_[c]) / range : 0.0;
  }
  return out;
}

void to_json(nlohmann::json& j, const Scaler& s) {
  j = nlohmann::json{{"mins", s.mins()}, {"maxs", s.maxs()}};
}

void from_json(const nlohmann::json& j, Scaler& s) {
  try {
    s = Scaler(j.at("mins").get<std::vector<double>>(), j.at("maxs").get<std::vector<double>>());
  } catch (const nlohmann::json::exception& e) {
    throw DataError(fmt::format("malformed scaler: {}", e.what()));
  }
}

TelemetryTable Scaler::inverse(const TelemetryTable& table) const {
  if (table.sensors() != sensors()) {
    throw DimensionError(fmt::format("scaler fitted on {} sensors, table has {}", sensors(), table.sensors()));
  }
  TelemetryTable out = table;
  const std::size_t n = sensors();
  auto values = out.values();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const std::size_t c = i % n;
    values[i] = mins_[c] + values[i] * (maxs_[c] - mins_[c]);
  }
  return out;
}

// ---- windows ---------------------------------------------------------------------------

std::size_t WindowedDataset::count(RowLabel label) const {
  return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), label));
}

WindowedDataset WindowedDataset::subset(std::span<const std::size_t> indices) const {
  WindowedDataset out;
  out.length = length;
  out.sensors = sensors;
  out.split_id = split_id;
  out.role = role;
  std::vector<double> values;
  values.reserve(indices.size() * dim());
  for (const std::size_t i : indices) {
    const auto w = window(i);
    values.insert(values.end(), w.begin(), w.end());
    out.labels.push_back(labels[i]);
    out.sources.push_back(sources[i]);
    out.start_rows.push_back(start_rows[i]);
  }
  out.windows = DenseArray({indices.size(), dim()}, std::move(values));
  return out;
}

WindowedDataset WindowedDataset::with_label(RowLabel label) const {
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < size(); ++i) {
    if (labels[i] == label) keep.push_back(i);
  }
  return subset(keep);
}

WindowedDataset WindowedDataset::concat(const WindowedDataset& a, const WindowedDataset& b) {
  if (a.size() == 0) return b;
  if (b.size() == 0) return a;
  if (a.dim() != b.dim() || a.sensors != b.sensors) throw DimensionError("concat: window shapes differ");
  WindowedDataset out = a;
  std::vector<double> values(a.windows.values().begin(), a.windows.values().end());
  values.insert(values.end(), b.windows.values().begin(), b.windows.values().end());
  out.windows = DenseArray({a.size() + b.size(), a.dim()}, std::move(values));
  out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
  out.sources.insert(out.sources.end(), b.sources.begin(), b.sources.end());
  out.start_rows.insert(out.start_rows.end(), b.start_rows.begin(), b.start_rows.end());
  out.skipped_segments += b.skipped_segments;
  return out;
}

WindowedDataset make_windows(const TelemetryTable& table, std::size_t length, std::size_t stride) {
  if (length == 0 || stride == 0) throw ContractError("make_windows: length and stride must be positive");
  WindowedDataset out;
  out.length = length;
  out.sensors = table.sensors();
  std::vector<double> values;
  const std::size_t n = table.sensors();

  std::size_t begin = 0;
  while (begin < table.rows()) {
    std::size_t end = begin + 1;
    while (end < table.rows() && table.source_index(end) == table.source_index(begin)) ++end;
    if (end - begin < length) {
      ++out.skipped_segments;
    } else {
      for (std::size_t start = begin; start + length <= end; start += stride) {
        bool fault = false;
        for (std::size_t r = start; r < start + length; ++r) fault = fault || table.label(r) == RowLabel::kFault;
        const auto first = table.values().subspan(start * n, length * n);
        values.insert(values.end(), first.begin(), first.end());
        out.labels.push_back(fault ? RowLabel::kFault : RowLabel::kNominal);
        out.sources.push_back(table.source(begin));
        out.start_rows.push_back(start);
      }
    }
    begin = end;
  }
  out.windows = DenseArray({out.labels.size(), length * n}, std::move(values));
  return out;
}

}  // namespace permflow
