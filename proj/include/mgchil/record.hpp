#pragma once

// Run record: one CSV row per tick. Column order is fixed (kRecordColumns)
// and only ever extended at the end. The first line is a '#' comment with
// run metadata as key=value pairs.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mgchil {

struct RecordError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

struct RunRow {
  long tick = 0;
  double t = 0.0;
  double p_dem = 0.0, q_dem = 0.0;
  double p_pcc = 0.0, q_pcc = 0.0;
  double soc = 0.0;
  double p_pv = 0.0;
  double p_inv = 0.0, q_inv = 0.0;  // applied by the inverter this tick
  double event_kw = 0.0;            // switched-in event load
  // Controller side; NaN when no controller report is available.
  double cmd_p = kNaN, cmd_q = kNaN;
  double p_ref = kNaN, q_ref = kNaN;
  double p_ref_manual = kNaN;
  double p_dem_bar = kNaN, p_dem_hat = kNaN;
  double p_soc_bar = kNaN;
  double err_p = kNaN, err_q = kNaN;
  double meas_t = kNaN;  // plant time of the measurement the controller used
  std::string mode = "none";
  std::uint32_t flags = 0;
  std::uint16_t faults = 0;

  bool operator==(const RunRow&) const = default;
};

inline const std::vector<std::string> kRecordColumns = {
    "tick",   "t",       "p_dem",     "q_dem",        "p_pcc",     "q_pcc",     "soc",
    "p_pv",   "p_inv",   "q_inv",     "event_kw",     "cmd_p",     "cmd_q",     "p_ref",
    "q_ref",  "p_ref_manual", "p_dem_bar", "p_dem_hat", "p_soc_bar", "err_p",   "err_q",
    "meas_t", "mode",    "flags",     "faults"};

struct RunMeta {
  std::map<std::string, std::string> values;

  double number(const std::string& key, double fallback) const {
    auto it = values.find(key);
    return it == values.end() ? fallback : std::stod(it->second);
  }
};

struct RunRecord {
  RunMeta meta;
  std::vector<RunRow> rows;
};

namespace detail {
inline std::string fmt_double(double v) {
  if (std::isnan(v)) return "nan";
  std::ostringstream os;
  os << std::setprecision(std::numeric_limits<double>::max_digits10) << v;
  return os.str();
}
}  // namespace detail

inline std::string format_row(const RunRow& r) {
  using detail::fmt_double;
  std::string s;
  s.reserve(256);
  auto add = [&s](const std::string& v) {
    if (!s.empty()) s += ',';
    s += v;
  };
  add(std::to_string(r.tick));
  for (double v : {r.t, r.p_dem, r.q_dem, r.p_pcc, r.q_pcc, r.soc, r.p_pv, r.p_inv, r.q_inv,
                   r.event_kw, r.cmd_p, r.cmd_q, r.p_ref, r.q_ref, r.p_ref_manual, r.p_dem_bar,
                   r.p_dem_hat, r.p_soc_bar, r.err_p, r.err_q, r.meas_t})
    add(fmt_double(v));
  add(r.mode);
  add(std::to_string(r.flags));
  add(std::to_string(r.faults));
  return s;
}

inline std::string format_meta(const RunMeta& m) {
  std::string s = "#";
  for (const auto& [k, v] : m.values) s += " " + k + "=" + v;
  return s;
}

inline std::string record_header() {
  std::string s;
  for (const auto& c : kRecordColumns) s += (s.empty() ? "" : ",") + c;
  return s;
}

// Streams rows to disk as they are produced so a crash leaves a usable
// partial record.
class RunRecordWriter {
 public:
  RunRecordWriter(const std::string& path, const RunMeta& meta) : os_(path) {
    if (!os_) throw RecordError("cannot open run record " + path);
    os_ << format_meta(meta) << '\n' << record_header() << '\n';
  }
  void write(const RunRow& r) { os_ << format_row(r) << '\n'; }
  void flush() { os_.flush(); }

 private:
  std::ofstream os_;
};

inline RunRow parse_row(const std::string& line, std::size_t line_no) {
  std::vector<std::string> f;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) f.push_back(cell);
  if (f.size() != kRecordColumns.size())
    throw RecordError("line " + std::to_string(line_no) + ": expected " +
                      std::to_string(kRecordColumns.size()) + " columns, got " +
                      std::to_string(f.size()));
  auto num = [&](std::size_t i) {
    try {
      std::size_t used = 0;
      const double v = std::stod(f[i], &used);
      if (used != f[i].size()) throw std::invalid_argument("trailing");
      return v;
    } catch (const std::exception&) {
      throw RecordError("line " + std::to_string(line_no) + ": bad number in column " +
                        kRecordColumns[i]);
    }
  };
  RunRow r;
  r.tick = static_cast<long>(num(0));
  double* fields[] = {&r.t,     &r.p_dem,     &r.q_dem,       &r.p_pcc,     &r.q_pcc,
                      &r.soc,   &r.p_pv,      &r.p_inv,       &r.q_inv,     &r.event_kw,
                      &r.cmd_p, &r.cmd_q,     &r.p_ref,       &r.q_ref,     &r.p_ref_manual,
                      &r.p_dem_bar, &r.p_dem_hat, &r.p_soc_bar, &r.err_p, &r.err_q, &r.meas_t};
  for (std::size_t i = 0; i < std::size(fields); ++i) *fields[i] = num(i + 1);
  r.mode = f[22];
  r.flags = static_cast<std::uint32_t>(num(23));
  r.faults = static_cast<std::uint16_t>(num(24));
  return r;
}

inline RunRecord read_run_record(std::istream& is) {
  RunRecord rec;
  std::string line;
  std::size_t line_no = 0;
  bool header_seen = false;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::stringstream ss(line.substr(1));
      std::string kv;
      while (ss >> kv) {
        const auto eq = kv.find('=');
        if (eq != std::string::npos) rec.meta.values[kv.substr(0, eq)] = kv.substr(eq + 1);
      }
      continue;
    }
    if (!header_seen) {
      if (line != record_header()) throw RecordError("unexpected run record header");
      header_seen = true;
      continue;
    }
    rec.rows.push_back(parse_row(line, line_no));
  }
  if (!header_seen) throw RecordError("run record has no header line");
  return rec;
}

inline RunRecord load_run_record(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw RecordError("cannot open run record " + path);
  return read_run_record(is);
}

}  // namespace mgchil
