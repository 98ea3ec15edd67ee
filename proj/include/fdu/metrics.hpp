#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace fdu {

/// One named scalar result with its coordinates. Fields that do not apply
/// stay empty and serialize as empty CSV cells.
struct MetricRecord {
  std::string run_id;
  std::string method;
  std::string domain;
  std::string layer;
  std::string metric;
  int k = -1;  // -1 = not applicable
  double value = 0.0;
  std::string flags;
};

/// Canonical float formatting: shortest round-trip representation so CSVs
/// are byte-stable for bit-identical doubles.
inline std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (const char c : s) {
    if (c == '"') out += "\"\"";
    else out += c;
  }
  out += "\"";
  return out;
}

inline void write_metric_csv(const std::filesystem::path& path,
                             const std::vector<MetricRecord>& records) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "run_id,method,layer,metric,k,value,flags\n";
  for (const auto& r : records) {
    os << csv_escape(r.run_id) << ',' << csv_escape(r.method) << ',' << csv_escape(r.layer) << ','
       << csv_escape(r.metric) << ',' << (r.k >= 0 ? std::to_string(r.k) : "") << ','
       << format_double(r.value) << ',' << csv_escape(r.flags) << '\n';
  }
}

inline std::vector<MetricRecord> read_metric_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  std::vector<MetricRecord> out;
  std::string line;
  std::getline(is, line);  // header
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    // Simple split: analysis CSVs never contain quoted commas.
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    while (cells.size() < 7) cells.emplace_back();
    MetricRecord r;
    r.run_id = cells[0];
    r.method = cells[1];
    r.layer = cells[2];
    r.metric = cells[3];
    r.k = cells[4].empty() ? -1 : std::stoi(cells[4]);
    r.value = std::stod(cells[5]);
    r.flags = cells[6];
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace fdu
