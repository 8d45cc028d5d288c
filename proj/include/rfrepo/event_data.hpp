#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "rfrepo/csv.hpp"

namespace rfrepo {

// One subject's recurrent-event history in traditional format: the observed
// event times plus the follow-up end C = min(dropout, administrative end).
// Event times are strictly increasing and never exceed censoring_time; an
// event at exactly the censoring time counts as observed.
struct SubjectRecord {
  std::string subject_id;
  std::vector<double> event_times;
  double censoring_time = 0.0;
};

struct EventDataset {
  std::vector<SubjectRecord> subjects;  // sorted by subject_id
  std::string time_unit;                // dataset-wide tag, e.g. "days"
};

enum class CovariateKind { continuous, ordered_categorical, binary };

inline CovariateKind covariate_kind_from_string(const std::string& s) {
  if (s == "continuous") return CovariateKind::continuous;
  if (s == "ordered_categorical" || s == "ordered-categorical") return CovariateKind::ordered_categorical;
  if (s == "binary") return CovariateKind::binary;
  throw std::runtime_error("unknown covariate kind '" + s + "'");
}

inline const char* to_string(CovariateKind k) {
  switch (k) {
    case CovariateKind::continuous: return "continuous";
    case CovariateKind::ordered_categorical: return "ordered_categorical";
    case CovariateKind::binary: return "binary";
  }
  return "?";
}

struct CovariateSchema {
  std::vector<std::string> names;
  std::vector<CovariateKind> kinds;  // parallel to names

  std::size_t size() const { return names.size(); }
};

// Covariate values keyed by (subject, check-in time). Rows supplied without a
// time are baseline values and are carried forward to every check-in; a timed
// cell, when present, takes precedence.
class CovariatePanel {
 public:
  CovariateSchema schema;

  using Cell = std::vector<std::optional<double>>;
  std::map<std::string, Cell> baseline;
  std::map<std::pair<std::string, double>, Cell> timed;

  std::optional<double> value(const std::string& subject, double t, std::size_t var) const {
    auto it = timed.find({subject, t});
    if (it != timed.end()) {
      if (it->second[var].has_value()) return it->second[var];
      // fall through: an empty timed cell may still be covered by baseline
    }
    auto bit = baseline.find(subject);
    if (bit != baseline.end()) return bit->second[var];
    if (it != timed.end()) return std::nullopt;
    return std::nullopt;
  }

  bool has_subject(const std::string& subject) const {
    if (baseline.count(subject)) return true;
    auto it = timed.lower_bound({subject, -std::numeric_limits<double>::infinity()});
    return it != timed.end() && it->first.first == subject;
  }
};

namespace detail {

inline void check_kind(CovariateKind kind, double v, const std::string& name, long line) {
  switch (kind) {
    case CovariateKind::binary:
      if (v != 0.0 && v != 1.0)
        throw std::runtime_error("line " + std::to_string(line) + ": binary covariate '" + name +
                                 "' must be coded 0 or 1, got " + format_double(v));
      break;
    case CovariateKind::ordered_categorical:
      if (v != std::floor(v))
        throw std::runtime_error("line " + std::to_string(line) + ": ordered-categorical covariate '" + name +
                                 "' must be integer coded, got " + format_double(v));
      break;
    case CovariateKind::continuous: break;
  }
}

}  // namespace detail

// Parses the traditional events file (header subject_id,time,is_event) into
// per-subject records. Exactly one is_event=0 row per subject carries the
// censoring time; event rows must appear in strictly increasing time order.
inline EventDataset parse_events(std::istream& in, std::string time_unit) {
  CsvTable table = read_csv(in);
  if (table.header != std::vector<std::string>{"subject_id", "time", "is_event"})
    throw std::runtime_error("events file: expected header 'subject_id,time,is_event'");
  if (table.rows.empty()) throw std::runtime_error("events file: empty stream (no data rows)");

  struct Builder {
    std::vector<double> events;
    std::vector<long> event_lines;
    std::optional<double> censor;
    long censor_line = 0;
  };
  std::map<std::string, Builder> builders;

  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& row = table.rows[r];
    long line = table.line_numbers[r];
    std::string where = "line " + std::to_string(line);
    if (row.size() != 3) throw std::runtime_error(where + ": expected 3 fields, got " + std::to_string(row.size()));
    const std::string& id = row[0];
    if (id.empty()) throw std::runtime_error(where + ": empty subject_id");
    double t = parse_double(row[1], where);
    if (t < 0.0) throw std::runtime_error(where + ": negative time for subject " + id);
    long ev = parse_long(row[2], where);
    if (ev != 0 && ev != 1) throw std::runtime_error(where + ": is_event must be 0 or 1 for subject " + id);

    Builder& b = builders[id];
    if (ev == 1) {
      if (!b.events.empty() && t <= b.events.back())
        throw std::runtime_error(where + ": non-ascending event times for subject " + id + " (" +
                                 format_double(b.events.back()) + " then " + format_double(t) + ")");
      b.events.push_back(t);
      b.event_lines.push_back(line);
    } else {
      if (b.censor.has_value())
        throw std::runtime_error(where + ": duplicate censoring row for subject " + id + " (first at line " +
                                 std::to_string(b.censor_line) + ")");
      b.censor = t;
      b.censor_line = line;
    }
  }

  EventDataset out;
  out.time_unit = std::move(time_unit);
  for (auto& [id, b] : builders) {
    if (!b.censor.has_value()) throw std::runtime_error("subject " + id + ": missing censoring row");
    for (std::size_t i = 0; i < b.events.size(); ++i) {
      if (b.events[i] > *b.censor)
        throw std::runtime_error("line " + std::to_string(b.event_lines[i]) + ": event after censoring for subject " +
                                 id + " (" + format_double(b.events[i]) + " > " + format_double(*b.censor) + ")");
    }
    out.subjects.push_back(SubjectRecord{id, std::move(b.events), *b.censor});
  }
  return out;  // std::map iteration already yields subject_id order
}

// Canonical serialization: subjects sorted by id, events ascending, censoring
// row last. parse_events(write_events(x)) == x.
inline void write_events(std::ostream& out, const EventDataset& data) {
  out << "subject_id,time,is_event\n";
  for (const auto& s : data.subjects) {
    for (double t : s.event_times) out << s.subject_id << ',' << format_double(t) << ",1\n";
    out << s.subject_id << ',' << format_double(s.censoring_time) << ",0\n";
  }
}

// Covariates file: header subject_id[,t],name1..nameP. An empty cell is a
// missing value. When known_subjects is supplied, rows for other ids fail.
inline CovariatePanel parse_covariates(std::istream& in, const CovariateSchema& schema,
                                       const std::set<std::string>* known_subjects = nullptr) {
  if (schema.names.size() != schema.kinds.size())
    throw std::invalid_argument("covariate schema: names/kinds size mismatch");
  CsvTable table = read_csv(in);
  if (table.header.empty() || table.header[0] != "subject_id")
    throw std::runtime_error("covariates file: missing required column subject_id");
  bool has_t = table.header.size() > 1 && table.header[1] == "t";
  std::size_t first_value = has_t ? 2 : 1;
  if (table.header.size() != first_value + schema.names.size())
    throw std::runtime_error("covariates file: expected " + std::to_string(schema.names.size()) +
                             " covariate columns, got " + std::to_string(table.header.size() - first_value));
  for (std::size_t j = 0; j < schema.names.size(); ++j) {
    if (table.header[first_value + j] != schema.names[j])
      throw std::runtime_error("covariates file: missing required column '" + schema.names[j] + "' (found '" +
                               table.header[first_value + j] + "')");
  }

  CovariatePanel panel;
  panel.schema = schema;
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& row = table.rows[r];
    long line = table.line_numbers[r];
    std::string where = "line " + std::to_string(line);
    if (row.size() != table.header.size())
      throw std::runtime_error(where + ": expected " + std::to_string(table.header.size()) + " fields");
    const std::string& id = row[0];
    if (known_subjects && !known_subjects->count(id)) throw std::runtime_error(where + ": unknown subject " + id);

    std::optional<double> t;
    if (has_t && !row[1].empty()) t = parse_double(row[1], where);

    CovariatePanel::Cell cell(schema.names.size());
    for (std::size_t j = 0; j < schema.names.size(); ++j) {
      const std::string& field = row[first_value + j];
      if (field.empty()) continue;
      double v = parse_double(field, where);
      detail::check_kind(schema.kinds[j], v, schema.names[j], line);
      cell[j] = v;
    }

    if (t.has_value()) {
      auto [it, inserted] = panel.timed.emplace(std::make_pair(id, *t), std::move(cell));
      if (!inserted) throw std::runtime_error(where + ": duplicate covariate row for subject " + id + " at t=" + format_double(*t));
    } else {
      auto [it, inserted] = panel.baseline.emplace(id, std::move(cell));
      if (!inserted) throw std::runtime_error(where + ": duplicate baseline covariate row for subject " + id);
    }
  }
  return panel;
}

struct ValidationReport {
  struct MissingCell {
    std::string subject;
    double t;
    std::string covariate;
  };
  std::vector<MissingCell> missing;
  std::vector<std::string> warnings;

  bool ok() const { return missing.empty(); }
};

// Report-only check that every (subject, check-in, covariate) cell downstream
// fitting will touch resolves to a value. grid_times are the generated
// check-in times (already capped at D - tau); a subject checks in at t < C.
inline ValidationReport validate_dataset(const EventDataset& data, const CovariatePanel& panel,
                                         const std::vector<double>& grid_times) {
  ValidationReport report;
  for (const auto& s : data.subjects) {
    bool any = false;
    for (double t : grid_times) {
      if (!(t < s.censoring_time)) continue;
      any = true;
      for (std::size_t j = 0; j < panel.schema.size(); ++j) {
        if (!panel.value(s.subject_id, t, j).has_value())
          report.missing.push_back({s.subject_id, t, panel.schema.names[j]});
      }
    }
    if (!any)
      report.warnings.push_back("subject " + s.subject_id +
                                " contributes no rows (censored before the first check-in)");
  }
  return report;
}

}  // namespace rfrepo
