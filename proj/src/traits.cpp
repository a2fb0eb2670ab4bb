#include "difproc/traits.hpp"

#include "difproc/model.hpp"
#include "traits_detail.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <limits>

namespace difproc {

namespace {

constexpr double kUniquenessFloor = 1e-3;

void check_response_matrix(const Mat& responses, Eigen::Index min_cols) {
  if (responses.rows() < 3) throw DataError("need at least 3 respondents");
  if (responses.cols() < min_cols) {
    throw DataError("need at least " + std::to_string(min_cols) + " items");
  }
  if (!responses.allFinite()) throw DataError("responses contain non-finite values");
}

void check_binary_matrix(const Mat& responses) {
  for (Eigen::Index j = 0; j < responses.cols(); ++j) {
    for (Eigen::Index i = 0; i < responses.rows(); ++i) {
      const double y = responses(i, j);
      if (y != 0.0 && y != 1.0) {
        throw DataError("binary items require responses in {0, 1}");
      }
    }
  }
}

// Marginal log-likelihood pieces of the one-factor model via the
// rank-one determinant and inverse identities, so no J x J factorization
// is needed inside the EM loop.
double factor_loglik(const Mat& s, const Vec& lam, const Vec& psi) {
  const Eigen::Index nj = lam.size();
  const Vec u = lam.cwiseQuotient(psi);
  const double prec = 1.0 + lam.dot(u);
  double logdet = std::log(prec);
  double tr = 0.0;
  for (Eigen::Index j = 0; j < nj; ++j) {
    logdet += std::log(psi(j));
    tr += s(j, j) / psi(j);
  }
  tr -= u.dot(s * u) / prec;
  return -0.5 * (nj * std::log(2.0 * M_PI) + logdet + tr);
}

}  // namespace

Vec initial_theta_linear(const Mat& responses, FactorFit* fit) {
  check_response_matrix(responses, 2);
  const Eigen::Index n = responses.rows();
  const Eigen::Index nj = responses.cols();

  const Vec mu = responses.colwise().mean();
  const Mat yc = responses.rowwise() - mu.transpose();
  const Mat s = yc.transpose() * yc / static_cast<double>(n);

  Vec lam = (s.diagonal() * 0.5).cwiseMax(kUniquenessFloor).cwiseSqrt();
  Vec psi = (s.diagonal() - lam.cwiseAbs2()).cwiseMax(kUniquenessFloor);

  FactorFit result;
  result.loglik_path.reserve(64);
  double ll_old = -std::numeric_limits<double>::infinity();
  const int max_iter = 2000;
  for (int it = 0; it < max_iter; ++it) {
    const Vec u = lam.cwiseQuotient(psi);
    const double v = 1.0 / (1.0 + lam.dot(u));
    const Vec m = (yc * u) * v;
    const double emm = m.squaredNorm() + static_cast<double>(n) * v;
    const Vec cross = yc.transpose() * m;
    lam = cross / emm;
    psi = (s.diagonal() * static_cast<double>(n) - 2.0 * lam.cwiseProduct(cross) +
           lam.cwiseAbs2() * emm) /
          static_cast<double>(n);
    psi = psi.cwiseMax(kUniquenessFloor);

    const double ll = static_cast<double>(n) * factor_loglik(s, lam, psi);
    result.loglik_path.push_back(ll);
    result.iterations = it + 1;
    result.loglik = ll;
    if (std::abs(ll - ll_old) < 1e-6) {
      result.converged = true;
      break;
    }
    ll_old = ll;
  }
  if (lam.sum() < 0.0) lam = -lam;
  result.loadings = lam;
  result.uniquenesses = psi;
  result.floored = (psi.array() <= kUniquenessFloor).any();

  const Vec u = lam.cwiseQuotient(psi);
  Vec scores = (yc * u) / (1.0 + lam.dot(u));
  const double mean = scores.mean();
  scores.array() -= mean;
  const double sd = std::sqrt(scores.squaredNorm() / static_cast<double>(n));
  if (!(sd > 1e-12)) throw DataError("factor scores are degenerate; items carry no common signal");
  scores /= sd;

  if (fit) *fit = std::move(result);
  return scores;
}

QuadratureRule normal_quadrature(int points) {
  if (points < 1) throw ConfigError("quadrature needs at least one point");
  Mat jacobi = Mat::Zero(points, points);
  for (int k = 1; k < points; ++k) {
    const double b = std::sqrt(static_cast<double>(k) / 2.0);
    jacobi(k, k - 1) = b;
    jacobi(k - 1, k) = b;
  }
  Eigen::SelfAdjointEigenSolver<Mat> es(jacobi);
  QuadratureRule rule;
  rule.nodes = es.eigenvalues() * std::sqrt(2.0);
  rule.weights = es.eigenvectors().row(0).transpose().cwiseAbs2();
  return rule;
}

ExpectedCounts expected_counts(const Mat& responses, const Vec& intercepts, const Vec& slopes,
                               const QuadratureRule& rule) {
  const Eigen::Index n = responses.rows();
  const detail::CountTables tables = detail::make_count_tables(intercepts, slopes, rule);
  const Eigen::Index nblocks = (n + detail::kCountBlock - 1) / detail::kCountBlock;

  std::vector<ExpectedCounts> parts(static_cast<size_t>(nblocks));
#pragma omp parallel for schedule(static)
  for (Eigen::Index b = 0; b < nblocks; ++b) {
    const Eigen::Index begin = b * detail::kCountBlock;
    const Eigen::Index end = std::min(n, begin + detail::kCountBlock);
    parts[static_cast<size_t>(b)] = detail::count_rows(responses, tables, begin, end);
  }

  ExpectedCounts total;
  total.node_counts = Vec::Zero(rule.nodes.size());
  total.item_counts = Mat::Zero(responses.cols(), rule.nodes.size());
  for (const ExpectedCounts& p : parts) {
    total.node_counts += p.node_counts;
    total.item_counts += p.item_counts;
    total.loglik += p.loglik;
  }
  return total;
}

namespace {

// Newton maximization of one item's expected binary log-likelihood over
// (intercept, slope) given posterior node masses.
void mstep_item(const Vec& nodes, const Vec& node_counts, const Vec& item_counts, double& d,
                double& a) {
  const Eigen::Index nq = nodes.size();
  const auto value = [&](double dd, double aa) {
    double h = 0.0;
    for (Eigen::Index q = 0; q < nq; ++q) {
      const double lp = dd + aa * nodes(q);
      h += item_counts(q) * lp - node_counts(q) * detail::softplus(lp);
    }
    return h;
  };

  const double scale = 1.0 + node_counts.sum();
  double h_old = value(d, a);
  for (int it = 0; it < 50; ++it) {
    double g0 = 0.0, g1 = 0.0, h00 = 0.0, h01 = 0.0, h11 = 0.0;
    for (Eigen::Index q = 0; q < nq; ++q) {
      const double z = std::clamp(d + a * nodes(q), -30.0, 30.0);
      const double mu = sigmoid(z);
      const double r = item_counts(q) - node_counts(q) * mu;
      g0 += r;
      g1 += r * nodes(q);
      const double w = node_counts(q) * std::max(mu * (1.0 - mu), 1e-10);
      h00 += w;
      h01 += w * nodes(q);
      h11 += w * nodes(q) * nodes(q);
    }
    if (std::max(std::abs(g0), std::abs(g1)) <= 1e-10 * scale) return;
    const double det = h00 * h11 - h01 * h01;
    if (!(det > 1e-12 * (1.0 + h00 * h11))) return;
    double step_d = (h11 * g0 - h01 * g1) / det;
    double step_a = (h00 * g1 - h01 * g0) / det;
    double factor = 1.0;
    for (int half = 0; half < 30; ++half) {
      const double h_new = value(d + factor * step_d, a + factor * step_a);
      if (h_new >= h_old - 1e-12 * (1.0 + std::abs(h_old))) {
        d += factor * step_d;
        a += factor * step_a;
        h_old = h_new;
        break;
      }
      factor *= 0.5;
    }
  }
}

}  // namespace

Vec initial_theta_2pl(const Mat& responses, TwoPlCalibration* calib) {
  check_response_matrix(responses, 2);
  check_binary_matrix(responses);
  const Eigen::Index n = responses.rows();
  const Eigen::Index nj = responses.cols();
  const QuadratureRule rule = normal_quadrature(21);

  TwoPlCalibration result;
  result.intercepts.resize(nj);
  result.slopes = Vec::Ones(nj);
  for (Eigen::Index j = 0; j < nj; ++j) {
    const double rate = std::clamp(responses.col(j).mean(), 0.02, 0.98);
    result.intercepts(j) = std::log(rate / (1.0 - rate));
  }

  result.loglik_path.reserve(128);
  const int max_iter = 500;
  for (int it = 0; it < max_iter; ++it) {
    const ExpectedCounts counts = expected_counts(responses, result.intercepts, result.slopes, rule);
    result.loglik = counts.loglik;
    result.loglik_path.push_back(counts.loglik);
    result.iterations = it + 1;

    double change = 0.0;
#pragma omp parallel for schedule(static) reduction(max : change)
    for (Eigen::Index j = 0; j < nj; ++j) {
      double d = result.intercepts(j);
      double a = result.slopes(j);
      mstep_item(rule.nodes, counts.node_counts, counts.item_counts.row(j).transpose(), d, a);
      change = std::max({change, std::abs(d - result.intercepts(j)),
                         std::abs(a - result.slopes(j))});
      result.intercepts(j) = d;
      result.slopes(j) = a;
    }
    if (change <= 1e-5) {
      result.converged = true;
      break;
    }
  }

  ItemBank bank;
  bank.items.resize(static_cast<size_t>(nj));
  for (Eigen::Index j = 0; j < nj; ++j) {
    bank.items[static_cast<size_t>(j)].params =
        ItemParams{LinkKind::logit, result.intercepts(j), result.slopes(j), 0.0, 1.0};
  }
  const Vec theta = score_traits(bank, responses);
  if (calib) *calib = std::move(result);
  return theta;
}

namespace {

std::vector<Eigen::Index> resolve_items(const ItemBank& bank, const Mat& responses,
                                        const std::vector<Eigen::Index>& use_items) {
  const Eigen::Index n = responses.rows();
  const Eigen::Index nj = static_cast<Eigen::Index>(bank.items.size());
  if (nj == 0) throw ConfigError("item bank is empty");
  if (responses.cols() != nj) {
    throw DataError("response columns do not match the item bank");
  }
  std::vector<Eigen::Index> use = use_items;
  if (use.empty()) {
    use.resize(static_cast<size_t>(nj));
    for (Eigen::Index j = 0; j < nj; ++j) use[static_cast<size_t>(j)] = j;
  }
  for (const Eigen::Index j : use) {
    if (j < 0 || j >= nj) throw ConfigError("item index out of range");
    const BankItem& item = bank.items[static_cast<size_t>(j)];
    if (item.eta.size() != 0 && item.eta.size() != n) {
      throw DataError("surrogate scores do not match the respondent count");
    }
    if (item.params.a1 != 0.0 && item.eta.size() == 0) {
      throw ConfigError("item has a surrogate loading but no surrogate scores");
    }
    if (item.params.link == LinkKind::identity && !(item.params.sigma2 > 0.0)) {
      throw ConfigError("identity item needs a positive residual variance");
    }
  }
  return use;
}

bool identity_only(const ItemBank& bank, const std::vector<Eigen::Index>& use) {
  for (const Eigen::Index j : use) {
    if (bank.items[static_cast<size_t>(j)].params.link != LinkKind::identity) return false;
  }
  return true;
}

}  // namespace

Vec score_traits(const ItemBank& bank, const Mat& responses,
                 const std::vector<Eigen::Index>& use_items, const ScoreOptions& opts,
                 ScoreDiag* diag) {
  const std::vector<Eigen::Index> use = resolve_items(bank, responses, use_items);
  const bool all_identity = identity_only(bank, use);
  if (all_identity) {
    double den = 0.0;
    for (const Eigen::Index j : use) {
      const ItemParams& p = bank.items[static_cast<size_t>(j)].params;
      den += p.a0 * p.a0 / std::max(p.sigma2, 1e-12);
    }
    if (!(den > 0.0)) throw NumericalError("items carry no trait information");
  }

  const Eigen::Index n = responses.rows();
  Vec theta(n);
  int clipped = 0;
  int worst = 0;
#pragma omp parallel for schedule(static) reduction(+ : clipped) reduction(max : worst)
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

double item_information(const ItemParams& params, double theta, double eta) {
  return detail::information_at(params, theta, eta);
}

double mean_item_information(const BankItem& item, const Vec& theta) {
  const Eigen::Index n = theta.size();
  if (n == 0) throw DataError("no respondents to average over");
  if (item.eta.size() != 0 && item.eta.size() != n) {
    throw DataError("surrogate scores do not match the respondent count");
  }
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    total += detail::information_at(item.params, theta(i), detail::respondent_eta(item, i));
  }
  return total / static_cast<double>(n);
}

}  // namespace difproc
