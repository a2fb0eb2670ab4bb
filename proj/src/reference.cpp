#include "difproc/reference.hpp"

#include "traits_detail.hpp"

namespace difproc::ref {

Vec score_traits(const ItemBank& bank, const Mat& responses,
                 const std::vector<Eigen::Index>& use_items, const ScoreOptions& opts,
                 ScoreDiag* diag) {
  const Eigen::Index n = responses.rows();
  const Eigen::Index nj = static_cast<Eigen::Index>(bank.items.size());
  if (responses.cols() != nj) throw DataError("response columns do not match the item bank");
  std::vector<Eigen::Index> use = use_items;
  if (use.empty()) {
    use.resize(static_cast<size_t>(nj));
    for (Eigen::Index j = 0; j < nj; ++j) use[static_cast<size_t>(j)] = j;
  }
  bool all_identity = true;
  for (const Eigen::Index j : use) {
    if (bank.items[static_cast<size_t>(j)].params.link != LinkKind::identity) {
      all_identity = false;
      break;
    }
  }

  Vec theta(n);
  int clipped = 0;
  int worst = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const detail::ScoreOne one = detail::score_one(bank, responses, i, use, all_identity, opts);
    theta(i) = one.theta;
    if (one.clipped) ++clipped;
    worst = std::max(worst, one.iterations);
  }
  if (diag) {
    diag->bounds_hit = clipped;
    diag->worst_iterations = worst;
  }
  return theta;
}

ExpectedCounts expected_counts(const Mat& responses, const Vec& intercepts, const Vec& slopes,
                               const QuadratureRule& rule) {
  const detail::CountTables tables = detail::make_count_tables(intercepts, slopes, rule);
  return detail::count_rows(responses, tables, 0, responses.rows());
}

}  // namespace difproc::ref
