#pragma once

// Per-round metrics traces and their CSV form.
//
// Trace file:  "# confed-trace v1", a column header row, then one row per
// recorded round. Floats use %.17g; optional cells are left empty.
// CTUS log:    "# confed-ctus v1", header, one row per CFL-SAGA round.

#include <cstdint>
#include <cstdio>
#include <istream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "confed/errors.hpp"

namespace confed {

struct TraceRow {
  long round = 0;
  double opg = 0.0;
  std::uint64_t vrsg_uploads = 0;
  std::uint64_t server_broadcasts = 0;
  std::uint64_t triggers = 0;
  std::optional<double> x_gap;
  std::optional<double> mean_gap;
  std::optional<double> table_gap;
  std::optional<double> y_gap;
  std::optional<double> consensus_margin;
};

struct MetricsTrace {
  std::vector<TraceRow> rows;
};

/// One CFL-SAGA round as seen by the upload rule.
struct CtusRecord {
  long round = 0;
  double opg = 0.0;
  std::uint64_t users = 0;
  std::uint64_t uploads = 0;
  std::uint64_t pruned_at_ratio = 0;  // users with ||Delta||^2 <= r_k * threshold_i
  double sum_delta_sq = 0.0;
  double sum_threshold_sq = 0.0;
  std::optional<double> lk;           // L_k from the SAGA tables (needs the D-metric)
};

inline constexpr std::string_view kTraceTag = "# confed-trace v1";
inline constexpr std::string_view kTraceHeader =
    "round,opg,vrsg_uploads,server_broadcasts,triggers,X,Xbar,D,Y,consensus_margin";
inline constexpr std::string_view kCtusTag = "# confed-ctus v1";
inline constexpr std::string_view kCtusHeader =
    "round,opg,users,uploads,pruned_at_ratio,sum_delta_sq,sum_threshold_sq,lk";

namespace detail {

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string fmt_opt(const std::optional<double>& v) { return v ? fmt_double(*v) : ""; }

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cell);
      cell.clear();
    } else if (c != '\r') {
      cell.push_back(c);
    }
  }
  out.push_back(cell);
  return out;
}

inline double parse_double(const std::string& s, std::size_t line) {
  std::size_t pos = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos == 0 || pos != s.size())
    throw FormatError("line " + std::to_string(line) + ": bad number '" + s + "'");
  return v;
}

inline std::uint64_t parse_u64(const std::string& s, std::size_t line) {
  if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos)
    throw FormatError("line " + std::to_string(line) + ": bad count '" + s + "'");
  return std::stoull(s);
}

inline std::optional<double> parse_opt(const std::string& s, std::size_t line) {
  if (s.empty()) return std::nullopt;
  return parse_double(s, line);
}

inline void expect_preamble(std::istream& is, std::string_view tag, std::string_view header) {
  std::string line;
  if (!std::getline(is, line) || line != tag)
    throw FormatError("missing version tag '" + std::string(tag) + "'");
  if (!std::getline(is, line) || line != header)
    throw FormatError("column header does not match schema '" + std::string(header) + "'");
}

}  // namespace detail

inline void write_trace_row(std::ostream& os, const TraceRow& r) {
  os << r.round << ',' << detail::fmt_double(r.opg) << ',' << r.vrsg_uploads << ','
     << r.server_broadcasts << ',' << r.triggers << ',' << detail::fmt_opt(r.x_gap) << ','
     << detail::fmt_opt(r.mean_gap) << ',' << detail::fmt_opt(r.table_gap) << ','
     << detail::fmt_opt(r.y_gap) << ',' << detail::fmt_opt(r.consensus_margin) << '\n';
}

inline void write_trace(std::ostream& os, const MetricsTrace& t) {
  os << kTraceTag << '\n' << kTraceHeader << '\n';
  for (const auto& r : t.rows) write_trace_row(os, r);
}

inline MetricsTrace read_trace(std::istream& is) {
  detail::expect_preamble(is, kTraceTag, kTraceHeader);
  MetricsTrace t;
  std::string line;
  std::size_t lineno = 2;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto c = detail::split_csv(line);
    if (c.size() != 10)
      throw FormatError("line " + std::to_string(lineno) + ": expected 10 columns, got " +
                        std::to_string(c.size()));
    TraceRow r;
    r.round = static_cast<long>(detail::parse_u64(c[0], lineno));
    r.opg = detail::parse_double(c[1], lineno);
    r.vrsg_uploads = detail::parse_u64(c[2], lineno);
    r.server_broadcasts = detail::parse_u64(c[3], lineno);
    r.triggers = detail::parse_u64(c[4], lineno);
    r.x_gap = detail::parse_opt(c[5], lineno);
    r.mean_gap = detail::parse_opt(c[6], lineno);
    r.table_gap = detail::parse_opt(c[7], lineno);
    r.y_gap = detail::parse_opt(c[8], lineno);
    r.consensus_margin = detail::parse_opt(c[9], lineno);
    if (!t.rows.empty() && r.round <= t.rows.back().round)
      throw FormatError("line " + std::to_string(lineno) + ": rounds must strictly increase");
    t.rows.push_back(r);
  }
  return t;
}

inline void write_ctus_row(std::ostream& os, const CtusRecord& r) {
  os << r.round << ',' << detail::fmt_double(r.opg) << ',' << r.users << ',' << r.uploads << ','
     << r.pruned_at_ratio << ',' << detail::fmt_double(r.sum_delta_sq) << ','
     << detail::fmt_double(r.sum_threshold_sq) << ',' << detail::fmt_opt(r.lk) << '\n';
}

inline void write_ctus_log(std::ostream& os, const std::vector<CtusRecord>& log) {
  os << kCtusTag << '\n' << kCtusHeader << '\n';
  for (const auto& r : log) write_ctus_row(os, r);
}

inline std::vector<CtusRecord> read_ctus_log(std::istream& is) {
  detail::expect_preamble(is, kCtusTag, kCtusHeader);
  std::vector<CtusRecord> out;
  std::string line;
  std::size_t lineno = 2;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto c = detail::split_csv(line);
    if (c.size() != 8)
      throw FormatError("line " + std::to_string(lineno) + ": expected 8 columns, got " +
                        std::to_string(c.size()));
    CtusRecord r;
    r.round = static_cast<long>(detail::parse_u64(c[0], lineno));
    r.opg = detail::parse_double(c[1], lineno);
    r.users = detail::parse_u64(c[2], lineno);
    r.uploads = detail::parse_u64(c[3], lineno);
    r.pruned_at_ratio = detail::parse_u64(c[4], lineno);
    r.sum_delta_sq = detail::parse_double(c[5], lineno);
    r.sum_threshold_sq = detail::parse_double(c[6], lineno);
    r.lk = detail::parse_opt(c[7], lineno);
    out.push_back(r);
  }
  return out;
}

}  // namespace confed
