#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "rfrepo/stats.hpp"

namespace rfrepo {

struct GlmOptions {
  int max_iterations = 100;
  double tol = 1e-8;  // max |coefficient change|
};

struct GlmFit {
  std::vector<std::string> names;  // "(intercept)" then the design columns
  Eigen::VectorXd beta;
  Eigen::MatrixXd robust_cov;  // sandwich, clustered by subject
  int iterations = 0;
  bool converged = false;
};

struct WaldRow {
  std::string name;
  double estimate = 0.0;
  double odds_ratio = 1.0;
  double se = 0.0;
  double z = 0.0;
  double p = 1.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
};

namespace detail {

inline Eigen::VectorXd glm_mu(const Eigen::MatrixXd& x, const Eigen::VectorXd& beta) {
  Eigen::VectorXd eta = x * beta;
  Eigen::VectorXd mu(eta.size());
  for (Eigen::Index i = 0; i < eta.size(); ++i) mu[i] = expit(eta[i]);
  return mu;
}

}  // namespace detail

// Logit-link quasi-score fit of pseudo-observation outcomes on a design,
// working variance mu(1-mu) with independence working correlation. With the
// canonical link the score is X'(y - mu), so the IRLS update is a Newton
// step; a step is halved while it fails to shrink the score norm, which
// keeps pseudo-values outside [0,1] from destabilizing the iteration.
// The design is supplied without the intercept; it is prepended here.
inline GlmFit fit_pseudo_logit(const Eigen::MatrixXd& design, const std::vector<std::string>& names,
                               const Eigen::VectorXd& y, const std::vector<int>& clusters,
                               const GlmOptions& opts = {}) {
  const Eigen::Index n = design.rows();
  const Eigen::Index k = design.cols() + 1;
  if (n == 0) throw std::invalid_argument("fit_pseudo_logit: empty design");
  if (y.size() != n) throw std::invalid_argument("fit_pseudo_logit: outcome length mismatch");
  if (static_cast<Eigen::Index>(clusters.size()) != n)
    throw std::invalid_argument("fit_pseudo_logit: cluster length mismatch");
  if (static_cast<Eigen::Index>(names.size()) != design.cols())
    throw std::invalid_argument("fit_pseudo_logit: names length mismatch");

  Eigen::MatrixXd x(n, k);
  x.col(0).setOnes();
  x.rightCols(design.cols()) = design;

  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(x);
  if (qr.rank() < k) throw std::runtime_error("fit_pseudo_logit: design is rank deficient");

  GlmFit fit;
  fit.names.reserve(static_cast<std::size_t>(k));
  fit.names.emplace_back("(intercept)");
  for (const auto& nm : names) fit.names.push_back(nm);
  fit.beta = Eigen::VectorXd::Zero(k);

  Eigen::VectorXd mu = detail::glm_mu(x, fit.beta);
  Eigen::VectorXd score = x.transpose() * (y - mu);
  double score_norm = score.lpNorm<Eigen::Infinity>();

  double last_step = std::numeric_limits<double>::infinity();
  for (int it = 1; it <= opts.max_iterations; ++it) {
    fit.iterations = it;
    Eigen::VectorXd w = mu.array() * (1.0 - mu.array());
    Eigen::MatrixXd h = x.transpose() * w.asDiagonal() * x;
    Eigen::VectorXd direction = h.ldlt().solve(score);

    double scale = 1.0;
    Eigen::VectorXd candidate;
    Eigen::VectorXd mu_cand;
    Eigen::VectorXd score_cand;
    double norm_cand = 0.0;
    for (int half = 0; half < 30; ++half) {
      candidate = fit.beta + scale * direction;
      mu_cand = detail::glm_mu(x, candidate);
      score_cand = x.transpose() * (y - mu_cand);
      norm_cand = score_cand.lpNorm<Eigen::Infinity>();
      if (norm_cand <= score_norm || norm_cand < 1e-12 * static_cast<double>(n)) break;
      scale *= 0.5;
    }

    last_step = (scale * direction).lpNorm<Eigen::Infinity>();
    fit.beta = candidate;
    mu = mu_cand;
    score = score_cand;
    score_norm = norm_cand;
    if (last_step < opts.tol && score_norm <= 1e-9 * static_cast<double>(n)) {
      fit.converged = true;
      break;
    }
  }

  // Sandwich covariance: bread from the working information, meat from
  // cluster-summed score contributions.
  Eigen::VectorXd w = mu.array() * (1.0 - mu.array());
  Eigen::MatrixXd bread = (x.transpose() * w.asDiagonal() * x).ldlt().solve(Eigen::MatrixXd::Identity(k, k));
  int max_cluster = 0;
  for (int c : clusters) max_cluster = std::max(max_cluster, c);
  Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(max_cluster + 1, k);
  for (Eigen::Index i = 0; i < n; ++i) sums.row(clusters[static_cast<std::size_t>(i)]) += (y[i] - mu[i]) * x.row(i);
  Eigen::MatrixXd meat = sums.transpose() * sums;
  fit.robust_cov = bread * meat * bread;
  return fit;
}

inline double predict_prob(const GlmFit& fit, std::span<const double> design_row) {
  if (static_cast<Eigen::Index>(design_row.size()) + 1 != fit.beta.size())
    throw std::invalid_argument("predict_prob: design row length mismatch");
  double eta = fit.beta[0];
  for (std::size_t j = 0; j < design_row.size(); ++j) eta += fit.beta[static_cast<Eigen::Index>(j) + 1] * design_row[j];
  return expit(eta);
}

inline std::vector<WaldRow> wald_table(const GlmFit& fit) {
  std::vector<WaldRow> out;
  out.reserve(static_cast<std::size_t>(fit.beta.size()));
  for (Eigen::Index j = 0; j < fit.beta.size(); ++j) {
    WaldRow row;
    row.name = fit.names[static_cast<std::size_t>(j)];
    row.estimate = fit.beta[j];
    row.odds_ratio = std::exp(fit.beta[j]);
    row.se = std::sqrt(fit.robust_cov(j, j));
    row.z = row.se > 0.0 ? row.estimate / row.se : 0.0;
    row.p = row.se > 0.0 ? two_sided_p(row.z) : 1.0;
    row.ci_low = std::exp(row.estimate - 1.96 * row.se);
    row.ci_high = std::exp(row.estimate + 1.96 * row.se);
    out.push_back(row);
  }
  return out;
}

// The two simulation-study regression designs. Input columns are z1..z7 in
// order; z5 and z7 are unused by the nonlinear design.
inline const std::vector<std::string>& model_a_names() {
  static const std::vector<std::string> names{"z2_sin_z1_over_z6", "z3_signed_by_z2", "z1_times_z6", "z2sq_times_z4"};
  return names;
}

inline Eigen::MatrixXd model_a_design(const Eigen::MatrixXd& z) {
  if (z.cols() != 7) throw std::invalid_argument("model_a_design: expected 7 covariate columns");
  Eigen::MatrixXd out(z.rows(), 4);
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    double z1 = z(i, 0), z2 = z(i, 1), z3 = z(i, 2), z4 = z(i, 3), z6 = z(i, 5);
    if (z6 == 0.0) throw std::runtime_error("model_a_design: z6 must be nonzero");
    out(i, 0) = z2 * std::sin(z1 / z6);
    out(i, 1) = z2 > 2.0 ? -z3 : z3;
    out(i, 2) = z1 * z6;
    out(i, 3) = z2 * z2 * z4;
  }
  return out;
}

inline const std::vector<std::string>& model_b_names() {
  static const std::vector<std::string> names{"z1", "z2", "z3", "z4", "z5", "z6", "z7"};
  return names;
}

inline Eigen::MatrixXd model_b_design(const Eigen::MatrixXd& z) {
  if (z.cols() != 7) throw std::invalid_argument("model_b_design: expected 7 covariate columns");
  return z;
}

}  // namespace rfrepo
