#pragma once

#include "difproc/model.hpp"
#include "difproc/traits.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

// Inner kernels shared by the parallel implementations in traits.cpp and
// the serial ones in reference.cpp, so both sides run identical
// per-respondent arithmetic.

namespace difproc::detail {

inline double softplus(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

// Score (d/dt) and curvature (d2/dt2) contribution of one item to a
// respondent's log-likelihood at trait value t. Binary links cap the
// linear predictor at +-30 and floor the variance weight at 1e-10, the
// same guards the GLM fitter uses.
inline void score_slope(const ItemParams& p, double y, double eta, double t, double& g,
                        double& curvature) {
  const double lp = p.d + p.a0 * t + p.a1 * eta;
  switch (p.link) {
    case LinkKind::identity: {
      const double s2 = std::max(p.sigma2, 1e-12);
      g += p.a0 * (y - lp) / s2;
      curvature -= p.a0 * p.a0 / s2;
      return;
    }
    case LinkKind::logit: {
      const double z = std::clamp(lp, -30.0, 30.0);
      const double mu = sigmoid(z);
      const double w = std::max(mu * (1.0 - mu), 1e-10);
      g += p.a0 * (y - mu);
      curvature -= p.a0 * p.a0 * w;
      return;
    }
    case LinkKind::probit: {
      const double z = std::clamp(lp, -30.0, 30.0);
      const double mu = norm_cdf(z);
      const double pdf = norm_pdf(z);
      const double w = std::max(mu * (1.0 - mu), 1e-10);
      g += p.a0 * pdf * (y - mu) / w;
      curvature -= p.a0 * p.a0 * pdf * pdf / w;
      return;
    }
  }
}

inline double information_at(const ItemParams& p, double t, double eta) {
  const double lp = p.d + p.a0 * t + p.a1 * eta;
  switch (p.link) {
    case LinkKind::identity:
      return p.a0 * p.a0 / std::max(p.sigma2, 1e-12);
    case LinkKind::logit: {
      const double z = std::clamp(lp, -30.0, 30.0);
      const double mu = sigmoid(z);
      return p.a0 * p.a0 * std::max(mu * (1.0 - mu), 1e-10);
    }
    case LinkKind::probit: {
      const double z = std::clamp(lp, -30.0, 30.0);
      const double mu = norm_cdf(z);
      const double pdf = norm_pdf(z);
      return p.a0 * p.a0 * pdf * pdf / std::max(mu * (1.0 - mu), 1e-10);
    }
  }
  return 0.0;
}

struct ScoreOne {
  double theta = 0.0;
  int iterations = 0;
  bool clipped = false;
};

inline double respondent_eta(const BankItem& item, Eigen::Index i) {
  return item.eta.size() > 0 ? item.eta(i) : 0.0;
}

// Trait of one respondent. With identity-only items this is the weighted
// least-squares average in closed form; otherwise a bracketed Newton
// search on the concave log-likelihood, falling back to bisection when a
// step leaves the bracket.
inline ScoreOne score_one(const ItemBank& bank, const Mat& responses, Eigen::Index i,
                          const std::vector<Eigen::Index>& use, bool all_identity,
                          const ScoreOptions& o) {
  ScoreOne out;
  if (all_identity) {
    double num = 0.0, den = 0.0;
    for (const Eigen::Index j : use) {
      const ItemParams& p = bank.items[static_cast<size_t>(j)].params;
      const double s2 = std::max(p.sigma2, 1e-12);
      const double e = respondent_eta(bank.items[static_cast<size_t>(j)], i);
      num += p.a0 * (responses(i, j) - p.d - p.a1 * e) / s2;
      den += p.a0 * p.a0 / s2;
    }
    const double t = num / den;
    out.theta = std::clamp(t, o.lower, o.upper);
    out.clipped = t < o.lower || t > o.upper;
    out.iterations = 1;
    return out;
  }

  const auto slope = [&](double t, double& curvature) {
    double g = 0.0;
    curvature = 0.0;
    for (const Eigen::Index j : use) {
      const BankItem& item = bank.items[static_cast<size_t>(j)];
      score_slope(item.params, responses(i, j), respondent_eta(item, i), t, g, curvature);
    }
    return g;
  };

  double lo = o.lower, hi = o.upper;
  double curv = 0.0;
  if (slope(lo, curv) <= 0.0) {
    out.theta = lo;
    out.clipped = true;
    out.iterations = 1;
    return out;
  }
  if (slope(hi, curv) >= 0.0) {
    out.theta = hi;
    out.clipped = true;
    out.iterations = 1;
    return out;
  }

  double t = 0.0;
  for (int it = 1; it <= o.max_iterations; ++it) {
    out.iterations = it;
    const double g = slope(t, curv);
    if (curv < 0.0 && std::abs(g / curv) <= o.tol * (1.0 + std::abs(t))) break;
    if (g > 0.0) {
      lo = t;
    } else {
      hi = t;
    }
    double next = curv < 0.0 ? t - g / curv : 0.5 * (lo + hi);
    if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
    if (hi - lo <= 1e-14 * (1.0 + std::abs(t))) break;
    t = next;
  }
  out.theta = t;
  return out;
}

// Precomputed tables of the binary marginal model at fixed item
// parameters: linear predictors per item x node, the per-node sum of
// softplus terms, and log prior weights.
struct CountTables {
  Mat lp;        // J x Q
  Vec softplus_sums;  // Q
  Vec log_weights;    // Q
};

inline CountTables make_count_tables(const Vec& intercepts, const Vec& slopes,
                                     const QuadratureRule& rule) {
  const Eigen::Index nj = intercepts.size();
  const Eigen::Index nq = rule.nodes.size();
  CountTables t;
  t.lp.resize(nj, nq);
  t.softplus_sums = Vec::Zero(nq);
  t.log_weights.resize(nq);
  for (Eigen::Index q = 0; q < nq; ++q) {
    for (Eigen::Index j = 0; j < nj; ++j) {
      const double lp = intercepts(j) + slopes(j) * rule.nodes(q);
      t.lp(j, q) = lp;
      t.softplus_sums(q) += softplus(lp);
    }
    t.log_weights(q) = std::log(rule.weights(q));
  }
  return t;
}

// Posterior masses accumulated over a contiguous respondent range, in
// row order. The parallel caller sums fixed 256-row blocks of these in
// block order; the serial reference covers the whole range at once.
inline ExpectedCounts count_rows(const Mat& responses, const CountTables& t, Eigen::Index begin,
                                 Eigen::Index end) {
  const Eigen::Index nj = responses.cols();
  const Eigen::Index nq = t.log_weights.size();
  const Eigen::Index nb = end - begin;
  ExpectedCounts out;
  out.node_counts = Vec::Zero(nq);
  out.item_counts = Mat::Zero(nj, nq);
  if (nb <= 0) return out;

  Mat post = responses.middleRows(begin, nb) * t.lp;  // joint log-mass, then posterior
  for (Eigen::Index r = 0; r < nb; ++r) {
    double best = -std::numeric_limits<double>::infinity();
    for (Eigen::Index q = 0; q < nq; ++q) {
      post(r, q) += t.log_weights(q) - t.softplus_sums(q);
      best = std::max(best, post(r, q));
    }
    double mass = 0.0;
    for (Eigen::Index q = 0; q < nq; ++q) mass += std::exp(post(r, q) - best);
    const double lse = best + std::log(mass);
    out.loglik += lse;
    for (Eigen::Index q = 0; q < nq; ++q) post(r, q) = std::exp(post(r, q) - lse);
  }
  out.node_counts = post.colwise().sum();
  out.item_counts = responses.middleRows(begin, nb).transpose() * post;
  return out;
}

constexpr Eigen::Index kCountBlock = 256;

}  // namespace difproc::detail
