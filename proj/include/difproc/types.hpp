#pragma once

#include <Eigen/Dense>

#include <optional>
#include <stdexcept>
#include <string>

namespace difproc {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// Error taxonomy maps onto process exit codes: ConfigError -> 2,
// DataError -> 3, NumericalError -> 4.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericalError : std::runtime_error {
  explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

// Raised by the closed-form solver when the sign pattern of the reduced
// problem admits no interior zero; callers should fall back to the
// numeric optimizer.
struct ConditionFailedError : NumericalError {
  explicit ConditionFailedError(const std::string& msg) : NumericalError(msg) {}
};

// Raised by the closed-form solver when the reduced response and group
// directions are (near-)collinear and the second eigenvector is not
// identified; callers should fall back to the numeric optimizer.
struct DegenerateGeometryError : NumericalError {
  explicit DegenerateGeometryError(const std::string& msg) : NumericalError(msg) {}
};

enum class LinkKind { identity, logit, probit };

std::string to_string(LinkKind link);
LinkKind link_from_string(const std::string& name);

// Per-item bundle: responses, process features, grouping covariates and
// target-trait values for N respondents. Binary group columns are coded
// 0/1; real-valued columns are treated as continuous covariates.
struct ItemDataset {
  Vec responses;  // N
  Mat features;   // N x K
  Mat groups;     // N x M (M may be 0)
  Vec theta;      // N

  Eigen::Index n() const { return responses.size(); }
  Eigen::Index k() const { return features.cols(); }
  Eigen::Index m() const { return groups.cols(); }

  // Throws DataError on inconsistent row counts, N < 2, K < 1, or a
  // binary-looking group column that does not contain both values.
  void validate(bool binary_responses) const;
};

// Fitted GLM for one model specification. The coefficient vector is laid
// out as (d, a0, [a1 if has_nuisance], lambda_1..lambda_M); se and cov
// follow the same order. sigma2 is the residual variance under the
// profile-MLE convention RSS/N and is meaningful for the identity link
// only.
struct GlmFit {
  Vec coef;
  Vec se;
  Mat cov;
  double sigma2 = 0.0;
  bool sigma2_floored = false;
  double loglik = 0.0;
  bool converged = false;
  int iterations = 0;
  bool separation = false;  // a |linear predictor| exceeded the cap at the convergence check

  bool has_nuisance = false;
  int group_count = 0;

  double d() const { return coef(0); }
  double a0() const { return coef(1); }
  double a1() const {
    if (!has_nuisance) throw NumericalError("fit has no nuisance coefficient");
    return coef(2);
  }
  Vec lambda() const { return coef.tail(group_count); }
};

// Unit-norm feature weights and the nuisance scores they induce on the
// dataset they were built from: eta = features * omega.
struct NuisanceScores {
  Vec eta;    // N
  Vec omega;  // K, ||omega|| = 1 within 1e-10
};

}  // namespace difproc
