#pragma once

#include "difproc/types.hpp"

#include <vector>

namespace difproc {

// One-factor maximum-likelihood factor analysis fitted by EM.
struct FactorFit {
  Vec loadings;      // J
  Vec uniquenesses;  // J, floored at 1e-3
  double loglik = 0.0;
  int iterations = 0;
  bool converged = false;
  bool floored = false;  // a uniqueness sits at its floor (Heywood direction)
  std::vector<double> loglik_path;
};

// Regression factor scores from a one-factor fit of the response matrix,
// standardized to mean 0 and unit variance. responses is N x J with
// J >= 2. Throws DataError on degenerate input.
Vec initial_theta_linear(const Mat& responses, FactorFit* fit = nullptr);

// Marginal-likelihood calibration of a two-parameter logistic bank,
// integrating the trait against a standard normal with fixed quadrature.
struct TwoPlCalibration {
  Vec intercepts;  // J
  Vec slopes;      // J
  double loglik = 0.0;
  int iterations = 0;
  bool converged = false;
  std::vector<double> loglik_path;
};

// EM calibration followed by per-respondent boxed maximum-likelihood
// scoring on [-6, 6]. responses is N x J with entries in {0, 1}.
Vec initial_theta_2pl(const Mat& responses, TwoPlCalibration* calib = nullptr);

// Nodes and weights integrating smooth functions against the standard
// normal density (weights sum to 1).
struct QuadratureRule {
  Vec nodes;
  Vec weights;
};
QuadratureRule normal_quadrature(int points);

// Item parameters for scoring respondents.
struct ItemParams {
  LinkKind link = LinkKind::identity;
  double d = 0.0;
  double a0 = 1.0;
  double a1 = 0.0;      // loading on the stored surrogate
  double sigma2 = 1.0;  // residual variance, identity link only
};

struct BankItem {
  ItemParams params;
  Vec eta;  // per-respondent surrogate scores; empty when the loading is 0
};

struct ItemBank {
  std::vector<BankItem> items;
  std::vector<Eigen::Index> dif_items;  // indices of corrected items
};

struct ScoreOptions {
  double lower = -6.0;
  double upper = 6.0;
  double tol = 1e-10;
  int max_iterations = 100;
};

struct ScoreDiag {
  int bounds_hit = 0;
  int worst_iterations = 0;
};

// Maximum-likelihood trait per respondent over the given item subset
// (empty means every item), clipped to the box. With identity-link items
// only this is a weighted least-squares average; otherwise a bracketed
// Newton search on the concave per-respondent log-likelihood.
Vec score_traits(const ItemBank& bank, const Mat& responses,
                 const std::vector<Eigen::Index>& use_items = {}, const ScoreOptions& opts = {},
                 ScoreDiag* diag = nullptr);

// Expected trait information carried by one item at a trait value. eta
// is the respondent's surrogate score (ignored at loading 0).
double item_information(const ItemParams& params, double theta, double eta);

// Average of item_information over respondents at their trait values.
double mean_item_information(const BankItem& item, const Vec& theta);

// Posterior-expected counts of the binary marginal model at fixed item
// parameters: node occupation masses, per-item success masses, and the
// marginal log-likelihood. This is the inner kernel of the calibration
// EM, exposed for its serial counterpart and the kernel benchmark.
struct ExpectedCounts {
  Vec node_counts;  // Q
  Mat item_counts;  // J x Q
  double loglik = 0.0;
};
ExpectedCounts expected_counts(const Mat& responses, const Vec& intercepts, const Vec& slopes,
                               const QuadratureRule& rule);

}  // namespace difproc
