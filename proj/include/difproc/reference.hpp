#pragma once

#include "difproc/traits.hpp"

namespace difproc::ref {

// Serial counterparts of the parallel kernels, kept as plain loops over
// respondents. They exist to cross-check the parallel implementations
// and to anchor the kernel benchmark; results agree with the parallel
// versions to reduction roundoff (bitwise for the scorer, whose
// respondents are independent).
Vec score_traits(const ItemBank& bank, const Mat& responses,
                 const std::vector<Eigen::Index>& use_items = {}, const ScoreOptions& opts = {},
                 ScoreDiag* diag = nullptr);

ExpectedCounts expected_counts(const Mat& responses, const Vec& intercepts, const Vec& slopes,
                               const QuadratureRule& rule);

}  // namespace difproc::ref
