#pragma once

#include "difproc/types.hpp"

namespace difproc {

// Inverse-link (mean) value at a linear predictor.
double link_mean(LinkKind link, double lp);

// Bernoulli helpers shared by the logistic/probit fitting and scoring code.
double sigmoid(double x);
double norm_cdf(double x);
double norm_pdf(double x);

// Sum of per-observation log densities at the given coefficients.
// Identity: Gaussian with the profile-MLE variance ||residual||^2 / N,
// floored at 1e-12 (set *variance_floored when the floor binds).
// Logit/probit: Bernoulli log-mass; responses must be 0/1.
// Throws NumericalError when the result is non-finite, DataError on
// responses outside the link's support.
double log_likelihood(LinkKind link, const Vec& responses, const Mat& design, const Vec& coef,
                      bool* variance_floored = nullptr);

// Score vector (gradient of log_likelihood in the coefficients). For the
// identity link this differentiates the profile likelihood, i.e. the
// variance is re-profiled at each coefficient value.
Vec score_vector(LinkKind link, const Vec& responses, const Mat& design, const Vec& coef);

// Maximum-likelihood GLM fit. Identity: closed-form least squares with
// sigma2 = RSS/N and covariance sigma2 * (X'X)^-1. Logit/probit:
// iteratively reweighted least squares (Newton with step halving) to
// score sup-norm 1e-8, at most 100 iterations, standard errors from the
// inverse observed information. Linear predictors are capped at +-30 in
// the weight computation; if the cap is active at the convergence check
// the fit is flagged as separated and returned with converged = false.
// Throws DataError when the design is rank deficient (naming the
// dependent columns) or has fewer than 2 rows.
GlmFit fit_glm(LinkKind link, const Vec& responses, const Mat& design,
               const Vec* warm_start = nullptr);

struct WaldResult {
  double estimate = 0.0;
  double se = 0.0;
  double z = 0.0;
  double p_value = 1.0;
};

// Two-sided Wald test for one coefficient. Throws NumericalError on a
// zero standard error or a fit that did not converge.
WaldResult wald_test(const GlmFit& fit, Eigen::Index which);

}  // namespace difproc
