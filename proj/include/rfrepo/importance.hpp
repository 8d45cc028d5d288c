#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "rfrepo/forest.hpp"
#include "rfrepo/rng.hpp"
#include "rfrepo/stats.hpp"

namespace rfrepo {

struct ImportanceOptions {
  int permutations = 100;
  std::uint64_t seed = 0;
  int threads = 1;
  // Permute within groups sharing the value of this column (typically the
  // check-in time) instead of across the whole out-of-bag set.
  int stratify_column = -1;
};

struct VariableImportance {
  std::string variable;
  double statistic = 0.0;  // mean out-of-bag MSE increase over permutations
  double sd = 0.0;         // spread of the per-permutation increases
  double z = 0.0;
  double p = 1.0;
  int permutations = 0;
};

namespace detail {

struct OobContext {
  std::vector<std::size_t> rows;                 // rows with at least one OOB tree
  std::vector<const std::vector<int>*> trees;    // parallel: eligible trees per row
  std::vector<double> base_prediction;           // parallel: honest prediction
  double base_mse = 0.0;
};

inline OobContext make_oob_context(const Forest& forest, const Dataset& data,
                                   const std::vector<std::vector<int>>& eligible) {
  OobContext ctx;
  for (std::size_t i = 0; i < data.n_rows(); ++i) {
    const auto& trees = eligible[static_cast<std::size_t>(data.row_subject[i])];
    if (trees.empty()) continue;
    double sum = 0.0;
    for (int b : trees)
      sum += predict_tree_with(forest.trees[static_cast<std::size_t>(b)],
                               [&](int var) { return data.columns[static_cast<std::size_t>(var)][i]; });
    ctx.rows.push_back(i);
    ctx.trees.push_back(&trees);
    ctx.base_prediction.push_back(sum / static_cast<double>(trees.size()));
  }
  double se = 0.0;
  for (std::size_t k = 0; k < ctx.rows.size(); ++k) {
    double d = ctx.base_prediction[k] - data.outcome[ctx.rows[k]];
    se += d * d;
  }
  ctx.base_mse = se / static_cast<double>(ctx.rows.size());
  return ctx;
}

// Permutes `values` in place, either globally or within strata.
inline void permute_values(std::vector<double>& values, const std::vector<std::vector<std::size_t>>& strata,
                           Rng& rng) {
  for (const auto& group : strata) {
    for (std::size_t k = group.size(); k > 1; --k) {
      std::uniform_int_distribution<std::size_t> pick(0, k - 1);
      std::swap(values[group[k - 1]], values[group[pick(rng)]]);
    }
  }
}

}  // namespace detail

// Permutation test of one variable on the out-of-bag sample: the variable's
// column is shuffled d times, out-of-bag predictions are recomputed against
// the pseudo-observation outcomes, and the mean MSE increase is referred to
// its permutation spread as an asymptotically standard-normal z.
inline VariableImportance permutation_importance(const Forest& forest, const Dataset& data, int var,
                                                 const ImportanceOptions& opts,
                                                 const std::vector<std::vector<int>>* eligible_cache = nullptr,
                                                 const detail::OobContext* ctx_cache = nullptr) {
  if (opts.permutations < 2) throw std::invalid_argument("permutation_importance: d must be >= 2");
  if (var < 0 || static_cast<std::size_t>(var) >= data.n_cols())
    throw std::invalid_argument("permutation_importance: variable index out of range");

  std::vector<std::vector<int>> eligible_local;
  if (!eligible_cache) {
    eligible_local = oob_trees_by_subject(forest, data.subject_ids.size());
    eligible_cache = &eligible_local;
  }
  detail::OobContext ctx_local;
  if (!ctx_cache) {
    ctx_local = detail::make_oob_context(forest, data, *eligible_cache);
    ctx_cache = &ctx_local;
  }
  const detail::OobContext& ctx = *ctx_cache;
  if (ctx.rows.empty()) throw std::runtime_error("permutation_importance: empty out-of-bag set");

  // Permutation strata over positions into ctx.rows.
  std::vector<std::vector<std::size_t>> strata;
  if (opts.stratify_column < 0) {
    strata.emplace_back(ctx.rows.size());
    std::iota(strata.back().begin(), strata.back().end(), std::size_t{0});
  } else {
    std::map<double, std::vector<std::size_t>> groups;
    const auto& key = data.columns[static_cast<std::size_t>(opts.stratify_column)];
    for (std::size_t k = 0; k < ctx.rows.size(); ++k) groups[key[ctx.rows[k]]].push_back(k);
    for (auto& [t, g] : groups) strata.push_back(std::move(g));
  }

  std::vector<double> original(ctx.rows.size());
  const auto& col = data.columns[static_cast<std::size_t>(var)];
  for (std::size_t k = 0; k < ctx.rows.size(); ++k) original[k] = col[ctx.rows[k]];

  const int d = opts.permutations;
  std::vector<double> delta(static_cast<std::size_t>(d));
  auto run_one = [&](int s) {
    Rng rng = substream(opts.seed, {stream_tag::importance, static_cast<std::uint64_t>(var),
                                    static_cast<std::uint64_t>(s)});
    std::vector<double> permuted = original;
    detail::permute_values(permuted, strata, rng);
    double se = 0.0;
    for (std::size_t k = 0; k < ctx.rows.size(); ++k) {
      const std::size_t i = ctx.rows[k];
      double shuffled = permuted[k];
      double sum = 0.0;
      for (int b : *ctx.trees[k])
        sum += predict_tree_with(forest.trees[static_cast<std::size_t>(b)], [&](int v) {
          return v == var ? shuffled : data.columns[static_cast<std::size_t>(v)][i];
        });
      double pred = sum / static_cast<double>(ctx.trees[k]->size());
      double diff = pred - data.outcome[i];
      se += diff * diff;
    }
    delta[static_cast<std::size_t>(s)] = se / static_cast<double>(ctx.rows.size()) - ctx.base_mse;
  };

  if (opts.threads <= 1) {
    for (int s = 0; s < d; ++s) run_one(s);
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < opts.threads; ++w)
      pool.emplace_back([&, w]() {
        for (int s = w; s < d; s += opts.threads) run_one(s);
      });
    for (auto& th : pool) th.join();
  }

  VariableImportance out;
  out.variable = data.column_names[static_cast<std::size_t>(var)];
  out.permutations = d;
  out.statistic = mean(delta);
  out.sd = sample_sd(delta);
  if (out.sd == 0.0) {
    // A variable untouched by every tree leaves predictions unchanged.
    out.z = 0.0;
    out.p = out.statistic == 0.0 ? 1.0 : 0.0;
    if (out.statistic != 0.0) out.z = out.statistic > 0.0 ? 1e308 : -1e308;
  } else {
    out.z = out.statistic / (out.sd / std::sqrt(static_cast<double>(d)));
    out.p = two_sided_p(out.z);
  }
  return out;
}

inline std::vector<VariableImportance> importance_report(const Forest& forest, const Dataset& data,
                                                         const ImportanceOptions& opts) {
  auto eligible = oob_trees_by_subject(forest, data.subject_ids.size());
  auto ctx = detail::make_oob_context(forest, data, eligible);
  std::vector<VariableImportance> out;
  out.reserve(data.n_cols());
  for (std::size_t var = 0; var < data.n_cols(); ++var)
    out.push_back(permutation_importance(forest, data, static_cast<int>(var), opts, &eligible, &ctx));
  return out;
}

}  // namespace rfrepo
