#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "rfrepo/rng.hpp"
#include "rfrepo/stats.hpp"

namespace rfrepo {

// A censored longitudinal row paired with a model score, where a higher
// score means a higher predicted chance of remaining event-free (and hence
// an expected longer residual time).
struct ScoredRow {
  std::string subject_id;
  double t = 0.0;
  double x = 0.0;
  bool event = false;
  double score = 0.0;
};

struct CStatOptions {
  bool within_t = false;  // restrict pairs to rows sharing a check-in time
  int threads = 1;
};

// Harrell's C over all row pairs: a pair is comparable when the shorter time
// is an observed event and the times differ; it is concordant when that row
// also carries the strictly lower score. Score ties count one half.
inline double harrell_c(std::span<const ScoredRow> rows, const CStatOptions& opts = {}) {
  const std::size_t n = rows.size();
  if (n < 2) throw std::runtime_error("harrell_c: need at least two rows");

  auto count_range = [&](std::size_t begin, std::size_t end, long long& comparable2, long long& concordant2) {
    long long comp = 0, conc2 = 0;
    for (std::size_t i = begin; i < end; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        if (opts.within_t && rows[i].t != rows[j].t) continue;
        const ScoredRow *shorter, *longer;
        if (rows[i].x < rows[j].x) {
          shorter = &rows[i];
          longer = &rows[j];
        } else if (rows[j].x < rows[i].x) {
          shorter = &rows[j];
          longer = &rows[i];
        } else {
          continue;  // tied times are not comparable
        }
        if (!shorter->event) continue;
        ++comp;
        if (shorter->score < longer->score)
          conc2 += 2;
        else if (shorter->score == longer->score)
          conc2 += 1;
      }
    }
    comparable2 = comp;
    concordant2 = conc2;
  };

  long long comparable = 0, concordant2 = 0;
  int threads = opts.threads;
  if (threads <= 1 || n < 512) {
    count_range(0, n, comparable, concordant2);
  } else {
    std::vector<long long> comp(threads, 0), conc(threads, 0);
    std::vector<std::thread> pool;
    // Interleaved striping keeps the per-thread work balanced even though
    // row i owns n-i-1 pairs.
    for (int w = 0; w < threads; ++w)
      pool.emplace_back([&, w]() {
        long long c = 0, k = 0;
        for (std::size_t i = static_cast<std::size_t>(w); i < n; i += static_cast<std::size_t>(threads)) {
          long long a = 0, b = 0;
          count_range(i, i + 1, a, b);
          c += a;
          k += b;
        }
        comp[w] = c;
        conc[w] = k;
      });
    for (auto& th : pool) th.join();
    for (int w = 0; w < threads; ++w) {
      comparable += comp[w];
      concordant2 += conc[w];
    }
  }

  if (comparable == 0) throw std::runtime_error("harrell_c: no comparable pairs");
  return static_cast<double>(concordant2) / (2.0 * static_cast<double>(comparable));
}

struct BootstrapResult {
  double se = 0.0;
  int samples = 0;   // resamples that produced a value
  int redraws = 0;   // resamples redrawn because the metric was undefined
  bool capped = false;
};

// Subject-level bootstrap standard error: subjects are resampled with
// replacement and each drawn subject brings all of its rows. Undefined
// resamples (metric throws) are redrawn up to a cap.
inline BootstrapResult bootstrap_se(const std::function<double(const std::vector<ScoredRow>&)>& metric,
                                    std::span<const ScoredRow> rows, int b, std::uint64_t seed, int threads = 1) {
  if (b < 2) throw std::invalid_argument("bootstrap_se: b must be >= 2");
  std::map<std::string, std::vector<std::size_t>> by_subject;
  for (std::size_t i = 0; i < rows.size(); ++i) by_subject[rows[i].subject_id].push_back(i);
  std::vector<const std::vector<std::size_t>*> groups;
  groups.reserve(by_subject.size());
  for (const auto& [id, idx] : by_subject) groups.push_back(&idx);
  const std::size_t n_subjects = groups.size();
  if (n_subjects == 0) throw std::invalid_argument("bootstrap_se: no rows");

  constexpr int kMaxRedrawsPerSample = 100;
  std::vector<double> values(static_cast<std::size_t>(b), std::numeric_limits<double>::quiet_NaN());
  std::vector<int> redraws(static_cast<std::size_t>(b), 0);

  auto run_one = [&](int s) {
    Rng rng = substream(seed, {stream_tag::bootstrap_se, static_cast<std::uint64_t>(s)});
    std::uniform_int_distribution<std::size_t> pick(0, n_subjects - 1);
    for (int attempt = 0; attempt <= kMaxRedrawsPerSample; ++attempt) {
      std::vector<ScoredRow> resample;
      resample.reserve(rows.size());
      for (std::size_t d = 0; d < n_subjects; ++d) {
        const auto& idx = *groups[pick(rng)];
        for (std::size_t i : idx) resample.push_back(rows[i]);
      }
      try {
        values[static_cast<std::size_t>(s)] = metric(resample);
        return;
      } catch (const std::exception&) {
        ++redraws[static_cast<std::size_t>(s)];
      }
    }
  };

  if (threads <= 1) {
    for (int s = 0; s < b; ++s) run_one(s);
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < threads; ++w)
      pool.emplace_back([&, w]() {
        for (int s = w; s < b; s += threads) run_one(s);
      });
    for (auto& th : pool) th.join();
  }

  BootstrapResult out;
  std::vector<double> ok;
  ok.reserve(values.size());
  for (std::size_t s = 0; s < values.size(); ++s) {
    out.redraws += redraws[s];
    if (std::isnan(values[s]))
      out.capped = true;
    else
      ok.push_back(values[s]);
  }
  out.samples = static_cast<int>(ok.size());
  if (out.samples < 2) throw std::runtime_error("bootstrap_se: metric undefined on nearly every resample");
  out.se = sample_sd(ok);
  return out;
}

// Rubin's rule pooling across multiply imputed analyses: the pooled variance
// inflates the between-imputation spread by (1 + 1/m).
struct PooledEstimate {
  double estimate = 0.0;
  double within = 0.0;
  double between = 0.0;
  double total = 0.0;
  int m = 0;
};

inline PooledEstimate rubin_combine(std::span<const double> estimates, std::span<const double> variances) {
  if (estimates.size() < 2) throw std::invalid_argument("rubin_combine: m must be >= 2");
  if (estimates.size() != variances.size()) throw std::invalid_argument("rubin_combine: size mismatch");
  for (double v : variances)
    if (v < 0.0) throw std::invalid_argument("rubin_combine: negative variance");
  PooledEstimate out;
  out.m = static_cast<int>(estimates.size());
  out.estimate = mean(estimates);
  out.within = mean(variances);
  out.between = sample_variance(estimates);
  out.total = out.within + (1.0 + 1.0 / static_cast<double>(out.m)) * out.between;
  return out;
}

}  // namespace rfrepo
