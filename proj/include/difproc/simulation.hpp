#pragma once

#include "difproc/pipeline.hpp"
#include "difproc/types.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace difproc {

enum class EffectBand { small, large };  // group-effect slope bands U(0.5,1) / U(1,1.5)

// Knobs of one synthetic study design. The defaults reproduce the
// standard desk-scale setting; n and k are only loosely constrained so
// smaller probe studies remain expressible.
struct SimConfig {
  Eigen::Index n = 500;
  Eigen::Index j_total = 25;
  Eigen::Index j_dif = 5;  // affected items, always the leading ones
  EffectBand dif_effect = EffectBand::small;
  LinkKind link = LinkKind::identity;
  bool nonuniform = false;
  Eigen::Index k = 10;  // feature columns before the response-copy append
  int replications = 100;
  std::uint64_t seed = 0;

  void validate() const;  // throws ConfigError
};

// Generating values behind one replication. Slopes and intercepts cover
// every item; weights and nuisance scores exist for the affected ones.
struct SimTruth {
  Vec theta;
  Vec d;
  Vec a0;
  Vec a1;                  // zero past the affected block
  std::vector<Vec> omega;  // unit norm, one per affected item
  std::vector<Vec> eta;    // unit sample variance, one per affected item
  Vec gamma;               // per-item slope-shift rates; empty when uniform
};

struct Replication {
  StudyData study;
  SimTruth truth;
};

// Test instrumentation for the generator; both hooks default to off.
struct GenHooks {
  // Replaces every per-item rate draw (the draw is skipped, keeping the
  // stream aligned with the uniform generator).
  const double* gamma_override = nullptr;
  // Captures each item's feature block before whitening.
  std::vector<Mat>* raw_features = nullptr;
};

// One synthetic study off the (seed, rep) stream: group labels with the
// trailing third focal, standard-normal traits, uniform intercepts and
// slopes, group-shifted features whitened to exactly unit sample
// covariance, exponential unit-norm weights on the affected items, and
// responses with the group effect carried entirely by the features.
// Identity studies add unit response noise and append a near-copy of the
// response (sd 0.1) to the affected and clean blocks alike.
Replication generate_replication(const SimConfig& cfg, std::uint64_t rep,
                                 const GenHooks* hooks = nullptr);

struct MseTriple {
  double d = 0.0;
  double a0 = 0.0;
  double a1 = 0.0;
};

// Squared calibration errors averaged over the given items; estimates[i]
// pairs with items[i].
MseTriple mse_items(const std::vector<ItemParams>& estimates, const SimTruth& truth,
                    const std::vector<Eigen::Index>& items);

// Absolute sample correlation; the surrogate's sign is not identified, so
// the aligned value is reported. Throws DataError on zero variance.
double corr_eta(const Vec& eta_hat, const Vec& eta_true);

// Between-group sum of squared trait bias: with nu = estimate - truth,
// each group contributes its size times the squared gap between its mean
// bias and the overall mean bias. Throws DataError unless the 0/1 group
// column contains both groups.
double ssb(const Vec& theta_est, const Vec& theta_true, const Vec& group);

struct RepFailure {
  int rep = 0;
  std::string message;
};

// Aggregated evaluation of one study. Scalars average over affected
// items and completed replications; the vectors keep one entry per
// affected item per completed replication (item-major within each
// replication) except the two ssb columns, which are per replication.
struct EvalReport {
  double mse_d = 0.0;
  double mse_a0 = 0.0;
  double mse_a1 = 0.0;
  double corr_eta = 0.0;
  Vec fi_before, fi_after;
  Vec ssb_uncorrected, ssb_corrected;
  Vec objective_before, objective_after;
  int replications = 0;  // completed
  std::vector<RepFailure> failures;
};

// Full Monte-Carlo loop: generate, take initial traits from the clean
// items, correct the affected items (their true indices; screening is
// exercised elsewhere), and score both calibrations on the affected
// items for the bias comparison. Replications run in parallel against
// independent substreams and are reduced in index order, so the report
// is a pure function of the config. Failed replications are recorded and
// excluded from every aggregate.
EvalReport run_study(const SimConfig& cfg);

}  // namespace difproc
