#pragma once

#include <algorithm>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "rfrepo/event_data.hpp"

namespace rfrepo {

// Shared check-in grid: window start times t_k = start + k*step for
// k = 0,1,2,... while t_k <= end - tau. start may be -step for the single
// pre-baseline burn-in window used by the simulation engine.
struct WindowGrid {
  double start = 0.0;  // t0
  double step = 0.0;   // a
  double tau = 0.0;    // follow-up window length
  double end = 0.0;    // administrative end D

  void validate() const {
    if (!(step > 0.0)) throw std::invalid_argument("grid: step must be > 0");
    if (!(tau > 0.0)) throw std::invalid_argument("grid: tau must be > 0");
    if (start < 0.0 && start != -step)
      throw std::invalid_argument("grid: start must be >= 0 (or exactly -step for the burn-in window)");
    if (end - tau < start) throw std::invalid_argument("grid: no check-in fits before end - tau");
  }

  std::vector<double> times() const {
    validate();
    std::vector<double> out;
    double cap = end - tau;
    double eps = 1e-9 * step;  // admit t_k == D - tau despite fp dust
    for (long k = 0;; ++k) {
      double t = start + static_cast<double>(k) * step;
      if (t > cap + eps) break;
      out.push_back(t);
    }
    return out;
  }
};

// One check-in of the censored longitudinal data set: the residual time x to
// the first event at or after t, or to censoring when no such event exists.
struct LongitudinalRow {
  std::string subject_id;
  double t = 0.0;
  double x = 0.0;
  bool event = false;
};

// Subject-specific check-ins: grid times with t < C_i (strict; a subject
// censored at a check-in no longer checks in) and t <= D - tau.
inline std::vector<double> checkin_times(const WindowGrid& grid, const SubjectRecord& record) {
  std::vector<double> out;
  for (double t : grid.times())
    if (t < record.censoring_time) out.push_back(t);
  return out;
}

inline void append_rows(const SubjectRecord& record, const std::vector<double>& grid_times,
                        std::vector<LongitudinalRow>& out) {
  for (double t : grid_times) {
    if (!(t < record.censoring_time)) continue;
    // first event at or after t; an event tied with t yields residual 0
    auto it = std::lower_bound(record.event_times.begin(), record.event_times.end(), t);
    if (it != record.event_times.end())
      out.push_back({record.subject_id, t, *it - t, true});
    else
      out.push_back({record.subject_id, t, record.censoring_time - t, false});
  }
}

// Censored longitudinal transform. Rows come out in (subject, t) order; the
// same inputs always produce byte-identical output.
inline std::vector<LongitudinalRow> transform(const std::vector<SubjectRecord>& records, const WindowGrid& grid) {
  std::vector<double> ts = grid.times();
  std::vector<const SubjectRecord*> sorted;
  sorted.reserve(records.size());
  for (const auto& r : records) sorted.push_back(&r);
  std::sort(sorted.begin(), sorted.end(),
            [](const SubjectRecord* a, const SubjectRecord* b) { return a->subject_id < b->subject_id; });
  std::vector<LongitudinalRow> rows;
  for (const auto* r : sorted) append_rows(*r, ts, rows);
  return rows;
}

// Fraction of observed events that survive into the longitudinal data set as
// the first event of at least one window.
inline double capture_rate(const std::vector<SubjectRecord>& records, const WindowGrid& grid) {
  std::vector<double> ts = grid.times();
  long total = 0, captured = 0;
  for (const auto& r : records) {
    total += static_cast<long>(r.event_times.size());
    std::vector<char> hit(r.event_times.size(), 0);
    for (double t : ts) {
      if (!(t < r.censoring_time)) continue;
      auto it = std::lower_bound(r.event_times.begin(), r.event_times.end(), t);
      if (it != r.event_times.end()) hit[static_cast<std::size_t>(it - r.event_times.begin())] = 1;
    }
    for (char h : hit) captured += h;
  }
  if (total == 0) throw std::runtime_error("capture_rate: no events to capture");
  return static_cast<double>(captured) / static_cast<double>(total);
}

// Spacing guidance: one-third of the mean gap between consecutive events.
// With fewer than two events per subject everywhere, the mean time to first
// event stands in for the gap.
inline double recommended_spacing(const std::vector<SubjectRecord>& records) {
  double gap_sum = 0.0;
  long gaps = 0;
  for (const auto& r : records)
    for (std::size_t j = 1; j < r.event_times.size(); ++j) {
      gap_sum += r.event_times[j] - r.event_times[j - 1];
      ++gaps;
    }
  if (gaps == 0) {
    for (const auto& r : records)
      if (!r.event_times.empty()) {
        gap_sum += r.event_times.front();
        ++gaps;
      }
  }
  if (gaps == 0) throw std::runtime_error("recommended_spacing: no events");
  return gap_sum / static_cast<double>(gaps) / 3.0;
}

inline void write_longitudinal(std::ostream& out, const std::vector<LongitudinalRow>& rows) {
  out << "subject_id,t,x,delta\n";
  for (const auto& r : rows)
    out << r.subject_id << ',' << format_double(r.t) << ',' << format_double(r.x) << ',' << (r.event ? '1' : '0')
        << '\n';
}

inline std::vector<LongitudinalRow> read_longitudinal(std::istream& in) {
  CsvTable table = read_csv(in);
  if (table.header != std::vector<std::string>{"subject_id", "t", "x", "delta"})
    throw std::runtime_error("longitudinal file: expected header 'subject_id,t,x,delta'");
  std::vector<LongitudinalRow> rows;
  rows.reserve(table.rows.size());
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& f = table.rows[r];
    std::string where = "line " + std::to_string(table.line_numbers[r]);
    if (f.size() != 4) throw std::runtime_error(where + ": expected 4 fields");
    long d = parse_long(f[3], where);
    if (d != 0 && d != 1) throw std::runtime_error(where + ": delta must be 0 or 1");
    rows.push_back({f[0], parse_double(f[1], where), parse_double(f[2], where), d == 1});
  }
  return rows;
}

}  // namespace rfrepo
