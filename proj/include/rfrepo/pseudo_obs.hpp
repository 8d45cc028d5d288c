#pragma once

#include <algorithm>
#include <map>
#include <numeric>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "rfrepo/event_data.hpp"
#include "rfrepo/window_transform.hpp"

namespace rfrepo {

// One (residual time, event indicator) observation inside a single window.
struct WindowObs {
  double x = 0.0;
  bool event = false;
};

struct KmResult {
  double survival = 1.0;
  // True when every observation fell before tau and the curve was carried
  // flat from its last value; surfaced so run reports can flag the window.
  bool extended = false;
};

namespace detail {

// Product-limit walk over observations sorted by time. Only event times
// strictly below tau contribute factors (left-limit convention: an event at
// exactly tau does not reduce P(T >= tau)); at tied times events are
// processed while the tied censorings still sit in the risk set.
inline KmResult km_sorted(std::span<const WindowObs> sorted, double tau) {
  const std::size_t n = sorted.size();
  double survival = 1.0;
  std::size_t i = 0;
  while (i < n && sorted[i].x < tau) {
    std::size_t j = i;
    long events = 0;
    while (j < n && sorted[j].x == sorted[i].x) {
      if (sorted[j].event) ++events;
      ++j;
    }
    if (events > 0) {
      double at_risk = static_cast<double>(n - i);
      survival *= 1.0 - static_cast<double>(events) / at_risk;
    }
    i = j;
  }
  bool extended = (i == n) && survival > 0.0 && (n == 0 || sorted[n - 1].x < tau);
  return {survival, extended};
}

inline std::vector<WindowObs> sorted_window(std::span<const WindowObs> rows) {
  std::vector<WindowObs> sorted(rows.begin(), rows.end());
  std::sort(sorted.begin(), sorted.end(), [](const WindowObs& a, const WindowObs& b) {
    if (a.x != b.x) return a.x < b.x;
    return a.event > b.event;
  });
  return sorted;
}

}  // namespace detail

inline KmResult km_survival_ex(std::span<const WindowObs> rows, double tau) {
  if (rows.empty()) throw std::invalid_argument("km_survival: empty window");
  if (tau <= 0.0) return {1.0, false};
  auto sorted = detail::sorted_window(rows);
  return detail::km_sorted(sorted, tau);
}

inline double km_survival(std::span<const WindowObs> rows, double tau) { return km_survival_ex(rows, tau).survival; }

// Jackknife pseudo-observations n*S - (n-1)*S^(-i) for one window; output
// order matches the input. The leave-one-out estimates are recomputed
// directly, which keeps this function its own oracle at these window sizes.
inline std::vector<double> pseudo_values(std::span<const WindowObs> rows, double tau) {
  const std::size_t n = rows.size();
  if (n < 2) throw std::runtime_error("pseudo_values: window too small for jackknife (n < 2)");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (rows[a].x != rows[b].x) return rows[a].x < rows[b].x;
    return rows[a].event > rows[b].event;
  });
  std::vector<WindowObs> sorted(n);
  std::vector<std::size_t> pos_of(n);  // original index -> sorted position
  for (std::size_t k = 0; k < n; ++k) {
    sorted[k] = rows[order[k]];
    pos_of[order[k]] = k;
  }

  double full = detail::km_sorted(sorted, tau).survival;

  std::vector<WindowObs> loo(n - 1);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t skip = pos_of[i];
    std::size_t w = 0;
    for (std::size_t k = 0; k < n; ++k)
      if (k != skip) loo[w++] = sorted[k];
    double leave_out = detail::km_sorted(loo, tau).survival;
    out[i] = static_cast<double>(n) * full - static_cast<double>(n - 1) * leave_out;
  }
  return out;
}

// One row of the regression-ready data set: the pseudo-observation of
// P(event-free over tau) at (subject, t) plus that row's covariate vector.
struct PseudoRow {
  std::string subject_id;
  double t = 0.0;
  double pseudo = 0.0;
  int n_at_risk = 0;
  std::vector<double> covariates;
};

struct PseudoDataset {
  std::vector<std::string> covariate_names;
  std::vector<PseudoRow> rows;
  int extended_windows = 0;  // windows where the KM curve was carried flat
};

// Groups longitudinal rows into windows by check-in time, computes the
// jackknife pseudo-values per window, and joins covariates from the panel.
// The check-in time itself is not duplicated into covariates here; model
// fitting appends it as the final predictor column.
inline PseudoDataset build_pseudo_dataset(const std::vector<LongitudinalRow>& rows, double tau,
                                          const CovariatePanel& panel) {
  std::map<double, std::vector<std::size_t>> windows;
  for (std::size_t i = 0; i < rows.size(); ++i) windows[rows[i].t].push_back(i);

  std::vector<double> pseudo(rows.size());
  std::vector<int> at_risk(rows.size());
  int extended = 0;
  for (const auto& [t, idx] : windows) {
    if (idx.size() < 2)
      throw std::runtime_error("window t=" + format_double(t) + ": too small for jackknife (n = " +
                               std::to_string(idx.size()) + ")");
    std::vector<WindowObs> obs;
    obs.reserve(idx.size());
    for (std::size_t i : idx) obs.push_back({rows[i].x, rows[i].event});
    if (km_survival_ex(obs, tau).extended) ++extended;
    std::vector<double> values = pseudo_values(obs, tau);
    for (std::size_t k = 0; k < idx.size(); ++k) {
      pseudo[idx[k]] = values[k];
      at_risk[idx[k]] = static_cast<int>(idx.size());
    }
  }

  PseudoDataset out;
  out.covariate_names = panel.schema.names;
  out.extended_windows = extended;
  std::vector<std::string> missing;
  out.rows.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    PseudoRow pr{rows[i].subject_id, rows[i].t, pseudo[i], at_risk[i], {}};
    pr.covariates.reserve(panel.schema.size());
    for (std::size_t j = 0; j < panel.schema.size(); ++j) {
      auto v = panel.value(rows[i].subject_id, rows[i].t, j);
      if (!v.has_value())
        missing.push_back("(" + rows[i].subject_id + ", t=" + format_double(rows[i].t) + ", " +
                          panel.schema.names[j] + ")");
      else
        pr.covariates.push_back(*v);
    }
    out.rows.push_back(std::move(pr));
  }
  if (!missing.empty()) {
    std::string msg = "missing covariate cells:";
    for (const auto& m : missing) msg += " " + m;
    throw std::runtime_error(msg);
  }
  return out;
}

inline void write_pseudo(std::ostream& out, const PseudoDataset& data) {
  out << "subject_id,t,pseudo";
  for (const auto& n : data.covariate_names) out << ',' << n;
  out << '\n';
  for (const auto& r : data.rows) {
    out << r.subject_id << ',' << format_double(r.t) << ',' << format_double(r.pseudo);
    for (double v : r.covariates) out << ',' << format_double(v);
    out << '\n';
  }
}

inline PseudoDataset read_pseudo(std::istream& in) {
  CsvTable table = read_csv(in);
  if (table.header.size() < 3 || table.header[0] != "subject_id" || table.header[1] != "t" ||
      table.header[2] != "pseudo")
    throw std::runtime_error("pseudo file: expected header 'subject_id,t,pseudo,<covariates...>'");
  PseudoDataset out;
  out.covariate_names.assign(table.header.begin() + 3, table.header.end());
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& f = table.rows[r];
    std::string where = "line " + std::to_string(table.line_numbers[r]);
    if (f.size() != table.header.size()) throw std::runtime_error(where + ": expected " + std::to_string(table.header.size()) + " fields");
    PseudoRow pr{f[0], parse_double(f[1], where), parse_double(f[2], where), 0, {}};
    for (std::size_t j = 3; j < f.size(); ++j) pr.covariates.push_back(parse_double(f[j], where));
    out.rows.push_back(std::move(pr));
  }
  return out;
}

}  // namespace rfrepo
