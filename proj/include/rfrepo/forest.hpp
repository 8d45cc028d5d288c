#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <istream>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "rfrepo/rng.hpp"
#include "rfrepo/stats.hpp"

namespace rfrepo {

struct ForestConfig {
  int n_trees = 500;
  int mtry = 0;       // 0 -> ceil(sqrt(p))
  int min_node = 40;  // minimum rows in each child of an admissible split
  int max_depth = 0;  // 0 -> unlimited
  std::uint64_t seed = 0;
  int threads = 1;
};

// Column-major training table. Rows are (subject, check-in) observations;
// the check-in time is expected to already be one of the columns so trees
// can branch on follow-up time like any other predictor.
struct Dataset {
  std::vector<std::string> subject_ids;        // unique subjects
  std::vector<int> row_subject;                // per-row index into subject_ids
  std::vector<double> outcome;                 // regression target (pseudo-values)
  std::vector<std::vector<double>> columns;    // p columns, each n_rows long
  std::vector<std::string> column_names;

  std::size_t n_rows() const { return outcome.size(); }
  std::size_t n_cols() const { return columns.size(); }

  void validate() const {
    if (row_subject.size() != n_rows()) throw std::invalid_argument("dataset: row_subject size mismatch");
    if (columns.size() != column_names.size()) throw std::invalid_argument("dataset: column names mismatch");
    for (const auto& c : columns)
      if (c.size() != n_rows()) throw std::invalid_argument("dataset: ragged column");
    for (int s : row_subject)
      if (s < 0 || static_cast<std::size_t>(s) >= subject_ids.size())
        throw std::invalid_argument("dataset: row_subject out of range");
  }

  // Rows of each subject, in row order; used to materialize bootstrap bags.
  std::vector<std::vector<int>> rows_by_subject() const {
    std::vector<std::vector<int>> out(subject_ids.size());
    for (std::size_t i = 0; i < row_subject.size(); ++i)
      out[static_cast<std::size_t>(row_subject[i])].push_back(static_cast<int>(i));
    return out;
  }
};

struct TreeNode {
  int var = -1;  // -1 marks a leaf
  double threshold = 0.0;
  int left = -1;
  int right = -1;
  double prediction = 0.0;
  int count = 0;

  bool is_leaf() const { return var < 0; }
};

struct Tree {
  std::vector<TreeNode> nodes;  // preorder; nodes[0] is the root
};

struct Forest {
  ForestConfig config;  // with mtry resolved
  std::vector<std::string> subject_ids;
  std::vector<std::string> column_names;
  std::vector<Tree> trees;
  std::vector<std::vector<int>> bags;        // per-tree drawn subjects, in draw order
  std::vector<std::vector<int>> bag_unique;  // per-tree sorted unique subjects
  std::uint64_t schema_fingerprint = 0;
  std::uint64_t config_fingerprint = 0;

  bool subject_in_bag(int tree, int subject) const {
    const auto& u = bag_unique[static_cast<std::size_t>(tree)];
    return std::binary_search(u.begin(), u.end(), subject);
  }
};

struct BootstrapDraw {
  std::vector<int> bag;  // n subject indices drawn with replacement, draw order
  std::vector<int> oob;  // subjects never drawn, ascending
};

// Stage one of the two-stage bootstrap: subjects are the resampling unit so
// long follow-up cannot overweight a subject; stage two (taking every row of
// each drawn subject, with multiplicity) happens when the bag is materialized.
inline BootstrapDraw two_stage_bootstrap(int n_subjects, Rng& rng) {
  if (n_subjects < 1) throw std::invalid_argument("two_stage_bootstrap: need n >= 1");
  BootstrapDraw out;
  out.bag.reserve(static_cast<std::size_t>(n_subjects));
  std::vector<char> seen(static_cast<std::size_t>(n_subjects), 0);
  std::uniform_int_distribution<int> pick(0, n_subjects - 1);
  for (int d = 0; d < n_subjects; ++d) {
    int s = pick(rng);
    out.bag.push_back(s);
    seen[static_cast<std::size_t>(s)] = 1;
  }
  for (int s = 0; s < n_subjects; ++s)
    if (!seen[static_cast<std::size_t>(s)]) out.oob.push_back(s);
  return out;
}

struct SplitChoice {
  int var = -1;
  double threshold = 0.0;
  double sse = 0.0;  // sum of squared errors of the two children
};

namespace detail {

struct SplitScratch {
  std::vector<std::pair<double, double>> vy;  // (covariate value, outcome)
};

}  // namespace detail

// Exhaustive SSE split search over the grid of values observed in the node.
// The split sends rows with value < threshold left. Returns nothing when no
// admissible split (both children >= min_node) strictly beats the unsplit
// node. Ties in SSE resolve to the lowest variable index, then the smallest
// threshold, because candidates and thresholds are scanned in ascending order.
inline std::optional<SplitChoice> best_split(const Dataset& data, std::span<const int> rows,
                                             std::span<const int> candidate_vars, int min_node,
                                             detail::SplitScratch& scratch) {
  if (candidate_vars.empty()) throw std::invalid_argument("best_split: no candidate variables");
  const std::size_t n = rows.size();
  if (n < 2) return std::nullopt;

  double sum = 0.0, sumsq = 0.0;
  for (int r : rows) {
    double y = data.outcome[static_cast<std::size_t>(r)];
    sum += y;
    sumsq += y * y;
  }
  const double nd = static_cast<double>(n);
  const double unsplit_score = sum * sum / nd;

  double best_score = unsplit_score;  // must be strictly exceeded
  int best_var = -1;
  double best_threshold = 0.0;

  auto& vy = scratch.vy;
  for (int var : candidate_vars) {
    const auto& col = data.columns[static_cast<std::size_t>(var)];
    vy.clear();
    for (int r : rows) vy.emplace_back(col[static_cast<std::size_t>(r)], data.outcome[static_cast<std::size_t>(r)]);
    std::sort(vy.begin(), vy.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    if (vy.front().first == vy.back().first) continue;  // constant in node

    double left_sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (i > 0 && vy[i].first != vy[i - 1].first) {
        const double nl = static_cast<double>(i);
        const double nr = nd - nl;
        if (i >= static_cast<std::size_t>(min_node) && n - i >= static_cast<std::size_t>(min_node)) {
          double right_sum = sum - left_sum;
          double score = left_sum * left_sum / nl + right_sum * right_sum / nr;
          if (score > best_score) {
            best_score = score;
            best_var = var;
            best_threshold = vy[i].first;
          }
        }
      }
      left_sum += vy[i].second;
    }
  }

  if (best_var < 0) return std::nullopt;
  return SplitChoice{best_var, best_threshold, sumsq - best_score};
}

namespace detail {

struct GrowContext {
  const Dataset* data;
  int mtry;
  int min_node;
  int max_depth;
  Rng* rng;
  std::vector<int>* rows;       // bag rows, partitioned in place
  std::vector<int> var_pool;    // reused candidate draw buffer
  SplitScratch scratch;
};

inline void draw_candidates(GrowContext& ctx, std::vector<int>& out) {
  const int p = static_cast<int>(ctx.data->n_cols());
  auto& pool = ctx.var_pool;
  pool.resize(static_cast<std::size_t>(p));
  std::iota(pool.begin(), pool.end(), 0);
  out.clear();
  for (int k = 0; k < ctx.mtry; ++k) {
    std::uniform_int_distribution<int> pick(k, p - 1);
    int j = pick(*ctx.rng);
    std::swap(pool[static_cast<std::size_t>(k)], pool[static_cast<std::size_t>(j)]);
    out.push_back(pool[static_cast<std::size_t>(k)]);
  }
  std::sort(out.begin(), out.end());
}

inline int grow_node(GrowContext& ctx, Tree& tree, std::size_t lo, std::size_t hi, int depth) {
  const auto& rows = *ctx.rows;
  const std::size_t n = hi - lo;
  double sum = 0.0;
  for (std::size_t i = lo; i < hi; ++i) sum += ctx.data->outcome[static_cast<std::size_t>(rows[i])];

  int node_index = static_cast<int>(tree.nodes.size());
  tree.nodes.push_back(TreeNode{});
  TreeNode& placeholder = tree.nodes.back();
  placeholder.prediction = sum / static_cast<double>(n);
  placeholder.count = static_cast<int>(n);

  if (ctx.max_depth > 0 && depth >= ctx.max_depth) return node_index;
  if (n < 2 * static_cast<std::size_t>(ctx.min_node)) return node_index;

  std::vector<int> candidates;
  draw_candidates(ctx, candidates);
  auto choice = best_split(*ctx.data, std::span<const int>(rows.data() + lo, n), candidates, ctx.min_node, ctx.scratch);
  if (!choice.has_value()) return node_index;

  const auto& col = ctx.data->columns[static_cast<std::size_t>(choice->var)];
  auto mid_it = std::partition(ctx.rows->begin() + static_cast<std::ptrdiff_t>(lo),
                               ctx.rows->begin() + static_cast<std::ptrdiff_t>(hi),
                               [&](int r) { return col[static_cast<std::size_t>(r)] < choice->threshold; });
  std::size_t mid = static_cast<std::size_t>(mid_it - ctx.rows->begin());

  tree.nodes[static_cast<std::size_t>(node_index)].var = choice->var;
  tree.nodes[static_cast<std::size_t>(node_index)].threshold = choice->threshold;
  int left = grow_node(ctx, tree, lo, mid, depth + 1);
  tree.nodes[static_cast<std::size_t>(node_index)].left = left;
  int right = grow_node(ctx, tree, mid, hi, depth + 1);
  tree.nodes[static_cast<std::size_t>(node_index)].right = right;
  return node_index;
}

}  // namespace detail

// Grows one tree on the given bag rows (row indices with multiplicity).
// Candidate variables are redrawn at every node.
inline Tree grow_tree(const Dataset& data, std::vector<int> bag_rows, const ForestConfig& config, Rng& rng) {
  if (bag_rows.empty()) throw std::invalid_argument("grow_tree: empty bag");
  Tree tree;
  tree.nodes.reserve(2 * bag_rows.size() / static_cast<std::size_t>(std::max(config.min_node, 1)) + 8);
  detail::GrowContext ctx{&data, config.mtry, config.min_node, config.max_depth, &rng, &bag_rows, {}, {}};
  detail::grow_node(ctx, tree, 0, bag_rows.size(), 0);
  return tree;
}

inline std::uint64_t schema_fingerprint(const std::vector<std::string>& column_names) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& n : column_names) {
    h = fnv1a64(n, h);
    h = fnv1a64("\x1f", h);
  }
  return h;
}

inline std::uint64_t config_fingerprint(const ForestConfig& c) {
  std::uint64_t fields[5] = {static_cast<std::uint64_t>(c.n_trees), static_cast<std::uint64_t>(c.mtry),
                             static_cast<std::uint64_t>(c.min_node), static_cast<std::uint64_t>(c.max_depth), c.seed};
  return fnv1a64(fields, sizeof(fields));
}

// Fits the forest: B independent two-stage bootstraps, each tree grown from
// its own seed-derived stream, so the result does not depend on thread count.
inline Forest fit(const Dataset& data, ForestConfig config) {
  data.validate();
  if (data.n_rows() == 0) throw std::invalid_argument("fit: empty dataset");
  if (data.n_cols() == 0) throw std::invalid_argument("fit: dataset has no covariates (p = 0)");
  if (config.n_trees < 1) throw std::invalid_argument("fit: n_trees must be >= 1");
  if (config.min_node < 1) throw std::invalid_argument("fit: min_node must be >= 1");
  const int p = static_cast<int>(data.n_cols());
  if (config.mtry == 0) config.mtry = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(p))));
  if (config.mtry < 1 || config.mtry > p) throw std::invalid_argument("fit: mtry must be in [1, p]");

  Forest forest;
  forest.config = config;
  forest.subject_ids = data.subject_ids;
  forest.column_names = data.column_names;
  forest.schema_fingerprint = schema_fingerprint(data.column_names);
  forest.config_fingerprint = config_fingerprint(config);
  forest.trees.resize(static_cast<std::size_t>(config.n_trees));
  forest.bags.resize(static_cast<std::size_t>(config.n_trees));
  forest.bag_unique.resize(static_cast<std::size_t>(config.n_trees));

  const auto subject_rows = data.rows_by_subject();
  const int n_subjects = static_cast<int>(data.subject_ids.size());

  auto build_one = [&](int b) {
    Rng rng = substream(config.seed, {stream_tag::tree, static_cast<std::uint64_t>(b)});
    BootstrapDraw draw = two_stage_bootstrap(n_subjects, rng);
    std::vector<int> bag_rows;
    for (int s : draw.bag) {
      const auto& rs = subject_rows[static_cast<std::size_t>(s)];
      bag_rows.insert(bag_rows.end(), rs.begin(), rs.end());
    }
    forest.trees[static_cast<std::size_t>(b)] = grow_tree(data, std::move(bag_rows), config, rng);
    auto uniq = draw.bag;
    std::sort(uniq.begin(), uniq.end());
    uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
    forest.bag_unique[static_cast<std::size_t>(b)] = std::move(uniq);
    forest.bags[static_cast<std::size_t>(b)] = std::move(draw.bag);
  };

  if (config.threads <= 1) {
    for (int b = 0; b < config.n_trees; ++b) build_one(b);
  } else {
    std::atomic<int> next{0};
    std::vector<std::thread> pool;
    for (int w = 0; w < config.threads; ++w)
      pool.emplace_back([&]() {
        for (int b = next.fetch_add(1); b < config.n_trees; b = next.fetch_add(1)) build_one(b);
      });
    for (auto& th : pool) th.join();
  }
  return forest;
}

// Accessor indirection lets prediction run either from a contiguous vector
// or from dataset columns with one value substituted (permutation tests).
template <typename ValueAt>
inline double predict_tree_with(const Tree& tree, ValueAt&& value_at) {
  const TreeNode* node = &tree.nodes[0];
  while (!node->is_leaf()) {
    int child = value_at(node->var) < node->threshold ? node->left : node->right;
    node = &tree.nodes[static_cast<std::size_t>(child)];
  }
  return node->prediction;
}

inline double predict_tree(const Tree& tree, std::span<const double> x) {
  return predict_tree_with(tree, [&](int var) { return x[static_cast<std::size_t>(var)]; });
}

inline double predict(const Forest& forest, std::span<const double> x) {
  if (x.size() != forest.column_names.size()) throw std::invalid_argument("predict: covariate vector length mismatch");
  double sum = 0.0;
  for (const auto& t : forest.trees) sum += predict_tree(t, x);
  return sum / static_cast<double>(forest.trees.size());
}

inline double clamp_unit(double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); }

// Trees eligible to score each subject out-of-bag. A row of a subject that
// landed in every bag has no honest tree and yields nullopt downstream.
inline std::vector<std::vector<int>> oob_trees_by_subject(const Forest& forest, std::size_t n_subjects) {
  std::vector<std::vector<int>> out(n_subjects);
  for (std::size_t s = 0; s < n_subjects; ++s)
    for (std::size_t b = 0; b < forest.trees.size(); ++b)
      if (!forest.subject_in_bag(static_cast<int>(b), static_cast<int>(s)))
        out[s].push_back(static_cast<int>(b));
  return out;
}

// Out-of-bag ensemble predictions for dataset rows: each row is averaged
// over exactly the trees whose bag excludes that row's subject.
inline std::vector<std::optional<double>> oob_predict(const Forest& forest, const Dataset& data) {
  data.validate();
  if (data.subject_ids != forest.subject_ids)
    throw std::invalid_argument("oob_predict: dataset subjects differ from the forest's training subjects");
  if (data.column_names != forest.column_names) throw std::invalid_argument("oob_predict: column mismatch");
  auto eligible = oob_trees_by_subject(forest, data.subject_ids.size());

  std::vector<std::optional<double>> out(data.n_rows());
  for (std::size_t i = 0; i < data.n_rows(); ++i) {
    const auto& trees = eligible[static_cast<std::size_t>(data.row_subject[i])];
    if (trees.empty()) continue;
    double sum = 0.0;
    for (int b : trees)
      sum += predict_tree_with(forest.trees[static_cast<std::size_t>(b)],
                               [&](int var) { return data.columns[static_cast<std::size_t>(var)][i]; });
    out[i] = sum / static_cast<double>(trees.size());
  }
  return out;
}

// ---- binary model format -------------------------------------------------
//
// magic "RFPO" | u32 format version | config (i32 n_trees, mtry, min_node,
// max_depth; u64 seed) | u64 config fp | u64 schema fp | column names |
// subject ids | per tree: bag (u32 count, u32 entries in draw order) and
// nodes in preorder (i32 var, f64 threshold, i32 left, i32 right,
// f64 prediction, i32 count). All integers little-endian.

namespace detail {

template <typename T>
void write_raw(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_raw(std::istream& in) {
  T v;
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error("model file: truncated");
  return v;
}

inline void write_string(std::ostream& out, const std::string& s) {
  write_raw<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& in) {
  auto len = read_raw<std::uint32_t>(in);
  std::string s(len, '\0');
  in.read(s.data(), static_cast<std::streamsize>(len));
  if (!in) throw std::runtime_error("model file: truncated string");
  return s;
}

}  // namespace detail

inline void save_forest(std::ostream& out, const Forest& forest) {
  out.write("RFPO", 4);
  detail::write_raw<std::uint32_t>(out, 1);
  detail::write_raw<std::int32_t>(out, forest.config.n_trees);
  detail::write_raw<std::int32_t>(out, forest.config.mtry);
  detail::write_raw<std::int32_t>(out, forest.config.min_node);
  detail::write_raw<std::int32_t>(out, forest.config.max_depth);
  detail::write_raw<std::uint64_t>(out, forest.config.seed);
  detail::write_raw<std::uint64_t>(out, forest.config_fingerprint);
  detail::write_raw<std::uint64_t>(out, forest.schema_fingerprint);
  detail::write_raw<std::uint32_t>(out, static_cast<std::uint32_t>(forest.column_names.size()));
  for (const auto& n : forest.column_names) detail::write_string(out, n);
  detail::write_raw<std::uint32_t>(out, static_cast<std::uint32_t>(forest.subject_ids.size()));
  for (const auto& s : forest.subject_ids) detail::write_string(out, s);
  for (std::size_t b = 0; b < forest.trees.size(); ++b) {
    const auto& bag = forest.bags[b];
    detail::write_raw<std::uint32_t>(out, static_cast<std::uint32_t>(bag.size()));
    for (int s : bag) detail::write_raw<std::uint32_t>(out, static_cast<std::uint32_t>(s));
    const auto& nodes = forest.trees[b].nodes;
    detail::write_raw<std::uint32_t>(out, static_cast<std::uint32_t>(nodes.size()));
    for (const auto& n : nodes) {
      detail::write_raw<std::int32_t>(out, n.var);
      detail::write_raw<double>(out, n.threshold);
      detail::write_raw<std::int32_t>(out, n.left);
      detail::write_raw<std::int32_t>(out, n.right);
      detail::write_raw<double>(out, n.prediction);
      detail::write_raw<std::int32_t>(out, n.count);
    }
  }
}

inline Forest load_forest(std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "RFPO", 4) != 0) throw std::runtime_error("model file: bad magic");
  auto version = detail::read_raw<std::uint32_t>(in);
  if (version != 1) throw std::runtime_error("model file: unsupported format version " + std::to_string(version));
  Forest forest;
  forest.config.n_trees = detail::read_raw<std::int32_t>(in);
  forest.config.mtry = detail::read_raw<std::int32_t>(in);
  forest.config.min_node = detail::read_raw<std::int32_t>(in);
  forest.config.max_depth = detail::read_raw<std::int32_t>(in);
  forest.config.seed = detail::read_raw<std::uint64_t>(in);
  forest.config_fingerprint = detail::read_raw<std::uint64_t>(in);
  forest.schema_fingerprint = detail::read_raw<std::uint64_t>(in);
  auto p = detail::read_raw<std::uint32_t>(in);
  forest.column_names.reserve(p);
  for (std::uint32_t j = 0; j < p; ++j) forest.column_names.push_back(detail::read_string(in));
  auto ns = detail::read_raw<std::uint32_t>(in);
  forest.subject_ids.reserve(ns);
  for (std::uint32_t s = 0; s < ns; ++s) forest.subject_ids.push_back(detail::read_string(in));
  forest.trees.resize(static_cast<std::size_t>(forest.config.n_trees));
  forest.bags.resize(forest.trees.size());
  forest.bag_unique.resize(forest.trees.size());
  for (std::size_t b = 0; b < forest.trees.size(); ++b) {
    auto bag_size = detail::read_raw<std::uint32_t>(in);
    auto& bag = forest.bags[b];
    bag.reserve(bag_size);
    for (std::uint32_t d = 0; d < bag_size; ++d) bag.push_back(static_cast<int>(detail::read_raw<std::uint32_t>(in)));
    auto uniq = bag;
    std::sort(uniq.begin(), uniq.end());
    uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
    forest.bag_unique[b] = std::move(uniq);
    auto n_nodes = detail::read_raw<std::uint32_t>(in);
    auto& nodes = forest.trees[b].nodes;
    nodes.resize(n_nodes);
    for (auto& n : nodes) {
      n.var = detail::read_raw<std::int32_t>(in);
      n.threshold = detail::read_raw<double>(in);
      n.left = detail::read_raw<std::int32_t>(in);
      n.right = detail::read_raw<std::int32_t>(in);
      n.prediction = detail::read_raw<double>(in);
      n.count = detail::read_raw<std::int32_t>(in);
    }
  }
  return forest;
}

}  // namespace rfrepo
