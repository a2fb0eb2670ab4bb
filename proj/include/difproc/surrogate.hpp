#pragma once

#include "difproc/types.hpp"

#include <cstdint>
#include <vector>

namespace difproc {

// Residuals of (Y, Z, X) against the two-column design (1, theta), with
// the feature residuals whitened to orthonormal columns. whitening_map
// carries original-feature coordinates to whitened coordinates:
// x_dag = resid(X) * whitening_map.
struct ResidualizedData {
  Vec y_dag;          // N
  Mat z_dag;          // N x M
  Mat x_dag;          // N x K', orthonormal columns
  Mat whitening_map;  // K x K'
};

// Intermediates of the closed-form solution. s1 and s2 are the extreme
// eigenvalues of the rank-two-update matrix restricted to the whitened
// feature space; s_rest holds the K'-2 middle eigenvalues (all equal to
// the reduced response/group inner product c).
struct ClosedFormIntermediates {
  Vec y_hat;  // K'
  Vec z_hat;  // K', sign-corrected so that c >= 0
  double c = 0.0;
  double s1 = 0.0;
  double s2 = 0.0;
  Vec s_rest;
  Vec q1;  // K', unit
  Vec q2;  // K', unit
  double alpha = 0.0;
  double beta = 0.0;
  bool condition_holds = false;
  bool z_sign_flipped = false;
};

enum class SurrogateMethod { closed_form, numeric };

struct SurrogateResult {
  NuisanceScores scores;
  double objective_value = 0.0;
  SurrogateMethod method = SurrogateMethod::closed_form;
  int restarts_used = 0;
  int group_count = 0;
  bool flagged = false;  // an inner fit failed to converge cleanly
};

// Diagnostics of one numeric minimization, for tests and reports.
struct NumericDiag {
  std::vector<double> start_values;     // objective at each start point
  std::vector<double> achieved_values;  // objective at each start's terminal point
  int chosen_start = -1;
  bool informed_start_used = false;
};

// Least-squares residuals of every column of Y, Z, X against (1, theta),
// then an SVD whitening of the feature residuals dropping directions with
// singular value below 1e-8 times the largest. Throws DataError when
// theta is constant or the feature residuals have rank 0.
ResidualizedData residualize(const ItemDataset& data);

// Likelihood-ratio objective at a unit-norm weight vector: the maximized
// log-likelihood of (1, theta, X*omega, G) minus that of
// (1, theta, X*omega), summed over grouping columns G. With nonuniform
// set, each group column Z contributes two terms, Z and Z.*theta.
// Inner-fit non-convergence is reported through *flagged, not thrown.
double objective_L(const Vec& omega, const ItemDataset& data, LinkKind link, bool nonuniform,
                   bool* flagged = nullptr);

// Same quantity evaluated without any nuisance column: the maximized
// log-likelihood of (1, theta, G) minus that of (1, theta), summed over
// the same term list. This is the pre-correction baseline in reports.
double objective_without_nuisance(const ItemDataset& data, LinkKind link, bool nonuniform,
                                  bool* flagged = nullptr);

// Analytic gradient of objective_L in the unconstrained parametrization
// v -> L(v / ||v||), evaluated at unit omega.
Vec objective_gradient(const Vec& omega, const ItemDataset& data, LinkKind link, bool nonuniform);

// Closed-form zero of the identity-link, single-group objective. Requires
// M = 1. Negates the group residual when its inner product with the
// response residual is negative (recorded in the intermediates), checks
// the interior-zero condition s1 < 0 < s2, and returns the root
// alpha*q1 + beta*q2 mapped back to original feature coordinates and
// renormalized. Throws ConditionFailedError when the condition fails and
// DegenerateGeometryError when the reduced directions are collinear; both
// mean "use the numeric optimizer".
std::pair<SurrogateResult, ClosedFormIntermediates> closed_form_omega(const ItemDataset& data,
                                                                      const ResidualizedData& res);

// The intermediates alone, computed without throwing on a failed interior
// condition (degenerate geometry still throws). Used by tests that probe
// both roots.
ClosedFormIntermediates closed_form_intermediates(const ResidualizedData& res);

// Map a whitened-coordinate vector back to a unit vector in original
// feature coordinates.
Vec map_back_unit(const ResidualizedData& res, const Vec& w_white);

struct NumericOptions {
  int restarts = 8;
  std::uint64_t seed = 0x5DF1F0;
  int max_iterations = 500;
  double gradient_tol = 1e-6;
};

// Multi-start quasi-Newton minimization of objective_L over the unit
// sphere via the normalize-inside parametrization. Starts are drawn
// uniformly from the positive orthant and normalized; the closed form
// computed on the same data is appended as an informed start when it is
// available. The winner is the best achieved value, with ties inside a
// 1e-6 relative window broken by the lowest start index. The returned
// weight vector is sign-canonicalized so the residualized surrogate
// aligns positively with the (sign-corrected) residualized first group
// column.
SurrogateResult numeric_omega(const ItemDataset& data, LinkKind link, bool nonuniform,
                              const NumericOptions& opts = {}, NumericDiag* diag = nullptr);

// Max absolute deviation between the analytic gradient of the normalized
// objective and central finite differences with step 1e-5.
double analytic_gradient_check(const ItemDataset& data, LinkKind link, const Vec& omega,
                               bool nonuniform = false);

}  // namespace difproc
