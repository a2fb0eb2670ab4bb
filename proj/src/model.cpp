#include "difproc/model.hpp"

#include <cmath>
#include <sstream>

namespace difproc {

namespace {

constexpr double kVarianceFloor = 1e-12;
constexpr double kPredictorCap = 30.0;
constexpr double kWeightFloor = 1e-10;
constexpr double kScoreTol = 1e-8;
constexpr int kMaxIrls = 100;

double bernoulli_logmass(double y, double lp) {
  // log(1 + e^lp) = max(lp, 0) + log1p(e^-|lp|) keeps the value finite
  // for any finite lp.
  return y * lp - (std::max(lp, 0.0) + std::log1p(std::exp(-std::abs(lp))));
}

void check_binary(const Vec& y) {
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    if (y(i) != 0.0 && y(i) != 1.0) {
      std::ostringstream msg;
      msg << "binary link requires 0/1 responses; found " << y(i) << " at row " << i;
      throw DataError(msg.str());
    }
  }
}

// Mean, density-of-linear-predictor and weight for one binary-link
// observation, with the predictor capped for numerical stability.
struct BinaryPoint {
  double mu;
  double weight;
  double dmu;  // d mu / d lp
};

BinaryPoint binary_point(LinkKind link, double lp) {
  const double c = std::clamp(lp, -kPredictorCap, kPredictorCap);
  if (link == LinkKind::logit) {
    const double mu = sigmoid(c);
    const double w = std::max(mu * (1.0 - mu), kWeightFloor);
    return {mu, w, mu * (1.0 - mu)};
  }
  const double mu = std::clamp(norm_cdf(c), 1e-15, 1.0 - 1e-15);
  const double dens = norm_pdf(c);
  const double w = std::max(dens * dens / (mu * (1.0 - mu)), kWeightFloor);
  return {mu, w, dens};
}

}  // namespace

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double norm_cdf(double x) { return 0.5 * std::erfc(-x * M_SQRT1_2); }

double norm_pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI); }

double link_mean(LinkKind link, double lp) {
  switch (link) {
    case LinkKind::identity:
      return lp;
    case LinkKind::logit:
      return sigmoid(lp);
    case LinkKind::probit:
      return norm_cdf(lp);
  }
  throw ConfigError("unknown link");
}

std::string to_string(LinkKind link) {
  switch (link) {
    case LinkKind::identity:
      return "identity";
    case LinkKind::logit:
      return "logit";
    case LinkKind::probit:
      return "probit";
  }
  throw ConfigError("unknown link");
}

LinkKind link_from_string(const std::string& name) {
  if (name == "identity") return LinkKind::identity;
  if (name == "logit") return LinkKind::logit;
  if (name == "probit") return LinkKind::probit;
  throw ConfigError("unknown link '" + name + "' (expected identity, logit or probit)");
}

void ItemDataset::validate(bool binary_responses) const {
  const Eigen::Index N = responses.size();
  if (N < 2) throw DataError("dataset needs at least 2 respondents");
  if (features.rows() != N || theta.size() != N || (groups.cols() > 0 && groups.rows() != N)) {
    throw DataError("responses, features, groups and theta must have equal row counts");
  }
  if (features.cols() < 1) throw DataError("dataset needs at least one feature column");
  if (binary_responses) check_binary(responses);
  for (Eigen::Index m = 0; m < groups.cols(); ++m) {
    bool binary = true, has0 = false, has1 = false;
    for (Eigen::Index i = 0; i < N; ++i) {
      const double g = groups(i, m);
      if (g == 0.0) has0 = true;
      else if (g == 1.0) has1 = true;
      else { binary = false; break; }
    }
    if (binary && !(has0 && has1)) {
      std::ostringstream msg;
      msg << "binary group column " << m << " must contain both 0 and 1";
      throw DataError(msg.str());
    }
  }
}

double log_likelihood(LinkKind link, const Vec& responses, const Mat& design, const Vec& coef,
                      bool* variance_floored) {
  if (design.rows() != responses.size()) throw DataError("design row count != response count");
  if (design.cols() != coef.size()) throw DataError("design column count != coefficient count");
  if (variance_floored) *variance_floored = false;
  const Eigen::Index n = responses.size();
  const Vec lp = design * coef;

  double ll = 0.0;
  if (link == LinkKind::identity) {
    const double rss = (responses - lp).squaredNorm();
    double s2 = rss / static_cast<double>(n);
    if (s2 < kVarianceFloor) {
      s2 = kVarianceFloor;
      if (variance_floored) *variance_floored = true;
    }
    ll = -0.5 * (static_cast<double>(n) * std::log(2.0 * M_PI * s2) + rss / s2);
  } else {
    check_binary(responses);
    for (Eigen::Index i = 0; i < n; ++i) {
      if (link == LinkKind::logit) {
        ll += bernoulli_logmass(responses(i), lp(i));
      } else {
        const double mu = norm_cdf(lp(i));
        ll += responses(i) > 0.5 ? std::log(mu) : std::log1p(-mu);
      }
    }
  }
  if (!std::isfinite(ll)) throw NumericalError("log-likelihood is not finite");
  return ll;
}

Vec score_vector(LinkKind link, const Vec& responses, const Mat& design, const Vec& coef) {
  const Eigen::Index n = responses.size();
  const Vec lp = design * coef;
  if (link == LinkKind::identity) {
    const Vec r = responses - lp;
    double s2 = r.squaredNorm() / static_cast<double>(n);
    if (s2 < kVarianceFloor) s2 = kVarianceFloor;
    return design.transpose() * r / s2;
  }
  Vec w(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (link == LinkKind::logit) {
      w(i) = responses(i) - sigmoid(lp(i));
    } else {
      // d log p / d lp = (y - mu) * phi / (mu (1 - mu)) for the probit link.
      const double mu = std::clamp(norm_cdf(lp(i)), 1e-15, 1.0 - 1e-15);
      w(i) = (responses(i) - mu) * norm_pdf(lp(i)) / (mu * (1.0 - mu));
    }
  }
  return design.transpose() * w;
}

GlmFit fit_glm(LinkKind link, const Vec& responses, const Mat& design, const Vec* warm_start) {
  const Eigen::Index n = responses.size();
  const Eigen::Index p = design.cols();
  if (n < 2) throw DataError("fit_glm needs at least 2 observations");
  if (design.rows() != n) throw DataError("design row count != response count");

  Eigen::ColPivHouseholderQR<Mat> qr(design);
  if (qr.rank() < p) {
    std::ostringstream msg;
    msg << "design matrix is rank deficient; dependent columns:";
    const auto perm = qr.colsPermutation().indices();
    for (Eigen::Index j = qr.rank(); j < p; ++j) msg << ' ' << perm(j);
    throw DataError(msg.str());
  }

  GlmFit fit;
  if (link == LinkKind::identity) {
    fit.coef = qr.solve(responses);
    const double rss = (responses - design * fit.coef).squaredNorm();
    fit.sigma2 = rss / static_cast<double>(n);
    if (fit.sigma2 < kVarianceFloor) {
      fit.sigma2 = kVarianceFloor;
      fit.sigma2_floored = true;
    }
    const Mat xtx = design.transpose() * design;
    fit.cov = fit.sigma2 * xtx.ldlt().solve(Mat::Identity(p, p));
    fit.se = fit.cov.diagonal().cwiseMax(0.0).cwiseSqrt();
    fit.loglik = log_likelihood(link, responses, design, fit.coef);
    fit.converged = true;
    fit.iterations = 1;
    return fit;
  }

  check_binary(responses);
  Vec beta = warm_start ? *warm_start : Vec::Zero(p);
  if (warm_start && warm_start->size() != p) throw ConfigError("warm start has wrong length");
  double ll = log_likelihood(link, responses, design, beta);
  Mat info = Mat::Identity(p, p);
  int it = 0;
  for (; it < kMaxIrls; ++it) {
    const Vec lp = design * beta;
    Vec grad = Vec::Zero(p);
    info.setZero();
    for (Eigen::Index i = 0; i < n; ++i) {
      const BinaryPoint pt = binary_point(link, lp(i));
      const double resid = responses(i) - pt.mu;
      // Score in lp units: (y - mu) for logit, (y - mu) phi / (mu(1-mu)) for probit.
      const double scr = link == LinkKind::logit
                             ? resid
                             : resid * pt.dmu / std::max(pt.mu * (1.0 - pt.mu), kWeightFloor);
      grad += scr * design.row(i).transpose();
      info += pt.weight * design.row(i).transpose() * design.row(i);
    }
    if (grad.lpNorm<Eigen::Infinity>() <= kScoreTol) {
      fit.converged = true;
      if (lp.lpNorm<Eigen::Infinity>() > kPredictorCap) {
        fit.separation = true;
        fit.converged = false;
      }
      break;
    }
    if (lp.lpNorm<Eigen::Infinity>() > kPredictorCap) {
      // The cap is binding; the likelihood is flat along the separated
      // direction, so report the capped fit rather than iterating on.
      fit.separation = true;
      fit.converged = false;
      break;
    }
    Vec step = info.ldlt().solve(grad);
    double t = 1.0;
    Vec cand = beta + step;
    double ll_new = log_likelihood(link, responses, design, cand);
    int halvings = 0;
    while ((!std::isfinite(ll_new) || ll_new < ll - 1e-10) && halvings < 40) {
      t *= 0.5;
      cand = beta + t * step;
      ll_new = log_likelihood(link, responses, design, cand);
      ++halvings;
    }
    beta = cand;
    ll = ll_new;
  }
  if (it == kMaxIrls) fit.converged = false;

  fit.coef = beta;
  fit.iterations = it;
  fit.loglik = ll;
  fit.cov = info.ldlt().solve(Mat::Identity(p, p));
  fit.se = fit.cov.diagonal().cwiseMax(0.0).cwiseSqrt();
  return fit;
}

WaldResult wald_test(const GlmFit& fit, Eigen::Index which) {
  if (!fit.converged) throw NumericalError("Wald test on a fit that did not converge");
  if (which < 0 || which >= fit.coef.size()) throw ConfigError("coefficient index out of range");
  WaldResult r;
  r.estimate = fit.coef(which);
  r.se = fit.se(which);
  if (r.se <= 0.0) throw NumericalError("degenerate information: zero standard error");
  r.z = r.estimate / r.se;
  r.p_value = std::erfc(std::abs(r.z) * M_SQRT1_2);
  return r;
}

}  // namespace difproc
