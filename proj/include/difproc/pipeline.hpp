#pragma once

#include "difproc/surrogate.hpp"
#include "difproc/traits.hpp"
#include "difproc/types.hpp"

#include <cstdint>
#include <vector>

namespace difproc {

// A full study: one response column and one feature block per item,
// grouping indicators shared across items.
struct StudyData {
  Mat responses;              // N x J
  std::vector<Mat> features;  // per item, N x K_j (empty allowed for items never corrected)
  Mat groups;                 // N x M, each column a 0/1 indicator

  Eigen::Index n() const { return responses.rows(); }
  Eigen::Index item_count() const { return responses.cols(); }
  Eigen::Index group_count() const { return groups.cols(); }

  // Shape and value checks; binary_responses additionally demands 0/1
  // response entries. Throws DataError.
  void validate(bool binary_responses) const;
};

struct PipelineConfig {
  LinkKind link = LinkKind::identity;
  std::vector<Eigen::Index> anchor_items;  // assumed free of group effects
  bool nonuniform = false;
  double alpha = 0.05;  // per-test flagging level
  int restarts = 8;
  std::uint64_t seed = 0;

  void validate(const StudyData& data) const;  // throws ConfigError
};

// One Wald test of a group effect on one item.
struct DetectionTest {
  Eigen::Index item = 0;
  Eigen::Index group = 0;
  double estimate = 0.0;
  double se = 0.0;
  double z = 0.0;
  double p_value = 1.0;
  bool flagged = false;
  bool degenerate = false;  // the fit failed (e.g. separation); flagged by policy
};

struct DetectionResult {
  Vec theta0;                            // initial traits from the anchor items
  std::vector<DetectionTest> tests;      // non-anchor items x group columns
  std::vector<Eigen::Index> dif_items;   // items flagged on any group column
};

// Anchor-based screening: initial traits from the anchor columns, then a
// per-item, per-group Wald test of the group coefficient in the model
// (1, theta0, Z). Items flagged on any column form the correction set.
DetectionResult run_detection(const StudyData& data, const PipelineConfig& cfg);

struct ItemCorrection {
  Eigen::Index item = 0;
  NuisanceScores scores;   // unit weights and raw surrogate
  Vec eta_used;            // surrogate entering the refit (residualized for identity)
  SurrogateMethod method = SurrogateMethod::closed_form;
  bool surrogate_flagged = false;
  double objective_before = 0.0;
  double objective_after = 0.0;
  double info_before = 0.0;
  double info_after = 0.0;
  GlmFit refit;            // coefficients (d, a0, a1) on (1, theta0, eta_used)
};

struct CorrectionResult {
  Vec theta0;
  std::vector<ItemCorrection> corrections;  // one per corrected item
  ItemBank bank;               // corrected parameters, full item set
  ItemBank bank_uncorrected;   // every item fit on (1, theta0) alone
  Vec theta_corrected;         // rescored on the corrected bank, all items
};

// Surrogate construction and refit for the given items: closed form on
// the identity link with a single group column (numeric fallback when its
// interior condition fails), the multi-start numeric minimizer otherwise.
// Remaining items are calibrated on (1, theta0) unchanged.
CorrectionResult run_correction(const StudyData& data, const PipelineConfig& cfg,
                                const Vec& theta0,
                                const std::vector<Eigen::Index>& dif_items);

// Largest remaining objective magnitude across the corrected items.
double residual_nuisance(const CorrectionResult& result);

}  // namespace difproc
