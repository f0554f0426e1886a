#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "upt/config.hpp"

namespace upt {

// Version of the column layout below; bump when columns change.
inline constexpr int kReportVersion = 1;

inline const std::vector<std::string>& report_columns() {
  static const std::vector<std::string> cols{
      "run_id", "seed", "sprefix", "lora", "l_adapter", "placement", "trainable_params",
      "total_params", "r1", "r5", "r10", "map", "wall_time_s"};
  return cols;
}

struct ReportRow {
  std::string run_id;
  std::uint64_t seed = 0;
  bool sprefix = false, lora = false, l_adapter = false;
  Placement placement = Placement::parallel_ln;
  std::size_t trainable_params = 0;
  std::size_t total_params = 0;
  double r1 = 0.0, r5 = 0.0, r10 = 0.0, map = 0.0;
  std::optional<double> wall_time_s;  // only with report.timing
};

inline ReportRow make_row(std::string run_id, std::uint64_t seed, const PETLConfig& petl,
                          const ParamPartition& partition, const RetrievalResult& r) {
  ReportRow row;
  row.run_id = std::move(run_id);
  row.seed = seed;
  row.sprefix = petl.sprefix;
  row.lora = petl.lora;
  row.l_adapter = petl.l_adapter;
  row.placement = petl.placement;
  row.trainable_params = partition.trainable_count;
  row.total_params = partition.total();
  row.r1 = r.r1;
  row.r5 = r.r5;
  row.r10 = r.r10;
  row.map = r.map;
  return row;
}

struct MetricsReport {
  nlohmann::json config;  // effective configuration
  std::vector<ReportRow> rows;
  nlohmann::json extra = nlohmann::json::object();  // JSON output only
};

namespace detail {

inline std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace detail

// Line 1: "# upt-metrics v<version>", line 2: "# config=<compact json>", then a
// header row and one row per result. wall_time_s is empty unless timed.
inline std::string to_csv(const MetricsReport& r) {
  std::ostringstream os;
  os << "# upt-metrics v" << kReportVersion << '\n';
  os << "# config=" << r.config.dump() << '\n';
  const auto& cols = report_columns();
  for (std::size_t i = 0; i < cols.size(); ++i) os << (i ? "," : "") << cols[i];
  os << '\n';
  for (const auto& row : r.rows) {
    os << row.run_id << ',' << row.seed << ',' << int(row.sprefix) << ',' << int(row.lora) << ','
       << int(row.l_adapter) << ',' << placement_name(row.placement) << ',' << row.trainable_params
       << ',' << row.total_params << ',' << detail::fmt_double(row.r1) << ','
       << detail::fmt_double(row.r5) << ',' << detail::fmt_double(row.r10) << ','
       << detail::fmt_double(row.map) << ',';
    if (row.wall_time_s) os << detail::fmt_double(*row.wall_time_s);
    os << '\n';
  }
  return os.str();
}

inline nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows) {
    rows.push_back({{"run_id", row.run_id},
                    {"seed", row.seed},
                    {"sprefix", row.sprefix},
                    {"lora", row.lora},
                    {"l_adapter", row.l_adapter},
                    {"placement", std::string(placement_name(row.placement))},
                    {"trainable_params", row.trainable_params},
                    {"total_params", row.total_params},
                    {"r1", row.r1},
                    {"r5", row.r5},
                    {"r10", row.r10},
                    {"map", row.map},
                    {"wall_time_s", row.wall_time_s ? nlohmann::json(*row.wall_time_s) : nlohmann::json()}});
  }
  nlohmann::json doc{{"version", kReportVersion}, {"columns", report_columns()}, {"config", r.config},
                     {"rows", std::move(rows)}};
  for (const auto& item : r.extra.items()) doc[item.key()] = item.value();
  return doc;
}

enum class ReportFormat { csv, json, both };

inline ReportFormat parse_report_format(const std::string& s) {
  if (s == "csv") return ReportFormat::csv;
  if (s == "json") return ReportFormat::json;
  if (s == "both") return ReportFormat::both;
  throw ConfigError("unknown report format '" + s + "'");
}

// Writes <base>.csv and/or <base>.json; returns what goes to stdout.
inline std::string emit_report(const MetricsReport& r, ReportFormat format, const std::string& base) {
  const std::string csv = to_csv(r);
  const std::string json = to_json(r).dump(2) + "\n";
  auto write = [](const std::string& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ConfigError("cannot write report " + path);
    os << text;
  };
  if (!base.empty()) {
    if (format != ReportFormat::json) write(base + ".csv", csv);
    if (format != ReportFormat::csv) write(base + ".json", json);
  }
  return format == ReportFormat::json ? json : csv;
}

}  // namespace upt
