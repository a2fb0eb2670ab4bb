#include "difproc/surrogate.hpp"

#include "difproc/model.hpp"
#include "difproc/rng.hpp"

#include <Eigen/QR>
#include <Eigen/SVD>

#include <cmath>
#include <limits>

namespace difproc {

namespace {

constexpr double kRankCutoff = 1e-8;
constexpr double kCollinearTol = 1e-10;
constexpr double kUnitTol = 1e-8;
constexpr double kTermRoundoff = 1e-8;
constexpr double kTieWindow = 1e-6;

// Thin orthonormal basis of the (1, theta) design.
Mat intercept_theta_basis(const Vec& theta) {
  const Eigen::Index n = theta.size();
  Mat d(n, 2);
  d.col(0).setOnes();
  d.col(1) = theta;
  Eigen::HouseholderQR<Mat> qr(d);
  return qr.householderQ() * Mat::Identity(n, 2);
}

struct LeanFit {
  Vec coef;
  double loglik = 0.0;
  double sigma2 = 0.0;
  bool converged = true;
  bool separation = false;
};

// Coefficients and maximized log-likelihood only; no covariance. The
// values agree with fit_glm, which remains the reference implementation.
LeanFit lean_fit(LinkKind link, const Vec& y, const Mat& design, const Vec* warm) {
  LeanFit out;
  if (link == LinkKind::identity) {
    const Eigen::Index n = y.size();
    out.coef = design.householderQr().solve(y);
    const double rss = (y - design * out.coef).squaredNorm();
    double s2 = rss / static_cast<double>(n);
    if (s2 < 1e-12) s2 = 1e-12;
    out.sigma2 = s2;
    out.loglik = -0.5 * (static_cast<double>(n) * std::log(2.0 * M_PI * s2) + rss / s2);
    return out;
  }
  GlmFit fit = fit_glm(link, y, design, warm);
  out.coef = fit.coef;
  out.loglik = fit.loglik;
  out.converged = fit.converged;
  out.separation = fit.separation;
  return out;
}

// Per-observation score in linear-predictor units at a fitted model;
// X' * this is the gradient of the log-likelihood through any design
// column. Identity uses the profile variance.
Vec lp_score(LinkKind link, const Vec& y, const Mat& design, const LeanFit& fit) {
  const Vec lp = design * fit.coef;
  if (link == LinkKind::identity) {
    return (y - lp) / fit.sigma2;
  }
  Vec w(y.size());
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    if (link == LinkKind::logit) {
      w(i) = y(i) - sigmoid(lp(i));
    } else {
      const double mu = std::clamp(norm_cdf(lp(i)), 1e-15, 1.0 - 1e-15);
      w(i) = (y(i) - mu) * norm_pdf(lp(i)) / (mu * (1.0 - mu));
    }
  }
  return w;
}

// Group-term columns of the objective: each grouping column, and with
// nonuniform set additionally its interaction with theta.
std::vector<Vec> objective_terms(const ItemDataset& data, bool nonuniform) {
  std::vector<Vec> terms;
  terms.reserve(static_cast<size_t>(data.m()) * (nonuniform ? 2 : 1));
  for (Eigen::Index m = 0; m < data.m(); ++m) {
    terms.push_back(data.groups.col(m));
    if (nonuniform) terms.push_back(data.groups.col(m).cwiseProduct(data.theta));
  }
  return terms;
}

double clamp_term(double t) {
  if (t < 0.0 && t > -kTermRoundoff) return 0.0;
  return t;
}

void require_unit(const Vec& omega) {
  if (std::abs(omega.norm() - 1.0) > kUnitTol) {
    throw ConfigError("omega must have unit norm");
  }
}

}  // namespace

ResidualizedData residualize(const ItemDataset& data) {
  const Eigen::Index n = data.n();
  const Vec& theta = data.theta;
  const double tmean = theta.mean();
  if ((theta.array() - tmean).abs().maxCoeff() <= 1e-12 * (1.0 + std::abs(tmean))) {
    throw DataError("theta is constant; cannot residualize against it");
  }

  const Mat q = intercept_theta_basis(theta);
  ResidualizedData res;
  res.y_dag = data.responses - q * (q.transpose() * data.responses);
  res.z_dag = data.groups - q * (q.transpose() * data.groups);
  const Mat xr = data.features - q * (q.transpose() * data.features);

  Eigen::BDCSVD<Mat> svd(xr, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Vec& sv = svd.singularValues();
  Eigen::Index rank = 0;
  while (rank < sv.size() && sv(rank) > kRankCutoff * sv(0)) ++rank;
  // The rank cutoff is relative, so a residual that is pure rounding
  // noise (features explained entirely by the basis) would otherwise
  // slip through; compare against the original feature scale as well.
  if (rank == 0 || sv(0) <= 1e-10 * (1.0 + data.features.norm())) {
    throw DataError("features carry no information beyond the target trait");
  }
  res.x_dag = svd.matrixU().leftCols(rank);
  res.whitening_map =
      svd.matrixV().leftCols(rank) * sv.head(rank).cwiseInverse().asDiagonal();
  return res;
}

double objective_L(const Vec& omega, const ItemDataset& data, LinkKind link, bool nonuniform,
                   bool* flagged) {
  require_unit(omega);
  if (data.m() < 1) throw ConfigError("objective needs at least one grouping column");
  if (flagged) *flagged = false;

  const Eigen::Index n = data.n();
  const Vec eta = data.features * omega;
  Mat base(n, 3);
  base.col(0).setOnes();
  base.col(1) = data.theta;
  base.col(2) = eta;

  const LeanFit red = lean_fit(link, data.responses, base, nullptr);
  if (flagged && (!red.converged || red.separation)) *flagged = true;

  Vec warm(4);
  warm << red.coef, 0.0;
  double total = 0.0;
  Mat full(n, 4);
  full.leftCols(3) = base;
  for (const Vec& g : objective_terms(data, nonuniform)) {
    full.col(3) = g;
    const LeanFit f = lean_fit(link, data.responses, full, &warm);
    if (flagged && (!f.converged || f.separation)) *flagged = true;
    total += clamp_term(f.loglik - red.loglik);
  }
  return total;
}

double objective_without_nuisance(const ItemDataset& data, LinkKind link, bool nonuniform,
                                  bool* flagged) {
  if (data.m() < 1) throw ConfigError("objective needs at least one grouping column");
  if (flagged) *flagged = false;
  const Eigen::Index n = data.n();
  Mat base(n, 2);
  base.col(0).setOnes();
  base.col(1) = data.theta;
  const LeanFit red = lean_fit(link, data.responses, base, nullptr);
  Vec warm(3);
  warm << red.coef, 0.0;
  double total = 0.0;
  Mat full(n, 3);
  full.leftCols(2) = base;
  for (const Vec& g : objective_terms(data, nonuniform)) {
    full.col(2) = g;
    const LeanFit f = lean_fit(link, data.responses, full, &warm);
    if (flagged && (!f.converged || f.separation)) *flagged = true;
    total += clamp_term(f.loglik - red.loglik);
  }
  return total;
}

Vec objective_gradient(const Vec& omega, const ItemDataset& data, LinkKind link, bool nonuniform) {
  require_unit(omega);
  const Eigen::Index n = data.n();
  const Vec eta = data.features * omega;
  Mat base(n, 3);
  base.col(0).setOnes();
  base.col(1) = data.theta;
  base.col(2) = eta;

  // Envelope theorem: at the inner maximizers only the explicit
  // dependence through the eta column survives, so each term contributes
  // a1_hat * X' * score and the inner coefficient paths drop out.
  const LeanFit red = lean_fit(link, data.responses, base, nullptr);
  const Vec w_red = lp_score(link, data.responses, base, red);
  Vec grad = Vec::Zero(data.k());
  Vec warm(4);
  warm << red.coef, 0.0;
  Mat full(n, 4);
  full.leftCols(3) = base;
  const auto terms = objective_terms(data, nonuniform);
  for (const Vec& g : terms) {
    full.col(3) = g;
    const LeanFit f = lean_fit(link, data.responses, full, &warm);
    const Vec w_full = lp_score(link, data.responses, full, f);
    grad += f.coef(2) * (data.features.transpose() * w_full);
  }
  grad -= static_cast<double>(terms.size()) * red.coef(2) * (data.features.transpose() * w_red);
  // Chain through v -> v/||v|| at ||v|| = 1: project out the radial part.
  return grad - omega * omega.dot(grad);
}

ClosedFormIntermediates closed_form_intermediates(const ResidualizedData& res) {
  if (res.z_dag.cols() != 1) {
    throw ConfigError("closed form requires exactly one grouping column");
  }
  ClosedFormIntermediates ci;
  Vec z = res.z_dag.col(0);
  double c = res.y_dag.dot(z);
  if (c < 0.0) {
    z = -z;
    c = -c;
    ci.z_sign_flipped = true;
  }
  ci.c = c;
  ci.y_hat = res.x_dag.transpose() * res.y_dag;
  ci.z_hat = res.x_dag.transpose() * z;
  const double ny = ci.y_hat.norm();
  const double nz = ci.z_hat.norm();
  if (ny < 1e-12 || nz < 1e-12) {
    throw DegenerateGeometryError(
        "reduced response or group direction vanishes in the feature space; "
        "use the numeric optimizer");
  }
  const double dot = ci.y_hat.dot(ci.z_hat);
  ci.s1 = c - (ny * nz + dot) / 2.0;
  ci.s2 = c + (ny * nz - dot) / 2.0;
  const Eigen::Index kp = res.x_dag.cols();
  ci.s_rest = Vec::Constant(std::max<Eigen::Index>(kp - 2, 0), c);

  Vec q1 = ny * ci.z_hat + nz * ci.y_hat;
  Vec q2 = ny * ci.z_hat - nz * ci.y_hat;
  const double n2 = q2.norm();
  if (n2 < kCollinearTol) {
    throw DegenerateGeometryError(
        "reduced response and group directions are collinear; the second "
        "eigenvector is not identified; use the numeric optimizer");
  }
  ci.q1 = q1 / q1.norm();
  ci.q2 = q2 / n2;
  ci.condition_holds = (ci.s1 < 0.0) && (ci.s2 > 0.0);
  if (ci.condition_holds) {
    ci.alpha = std::sqrt(ci.s2 / (ci.s2 - ci.s1));
    ci.beta = std::sqrt(-ci.s1 / (ci.s2 - ci.s1));
  }
  return ci;
}

Vec map_back_unit(const ResidualizedData& res, const Vec& w_white) {
  Vec omega = res.whitening_map * w_white;
  const double nrm = omega.norm();
  if (nrm < 1e-300) throw NumericalError("whitened direction maps to the zero vector");
  return omega / nrm;
}

std::pair<SurrogateResult, ClosedFormIntermediates> closed_form_omega(
    const ItemDataset& data, const ResidualizedData& res) {
  if (res.x_dag.rows() != data.n() || res.whitening_map.rows() != data.k()) {
    throw ConfigError("residualized data does not match the dataset");
  }
  ClosedFormIntermediates ci = closed_form_intermediates(res);
  if (!ci.condition_holds) {
    throw ConditionFailedError("interior-zero condition fails (s1 = " + std::to_string(ci.s1) +
                               ", s2 = " + std::to_string(ci.s2) +
                               "); use the numeric optimizer");
  }
  SurrogateResult out;
  out.scores.omega = map_back_unit(res, ci.alpha * ci.q1 + ci.beta * ci.q2);
  out.scores.eta = data.features * out.scores.omega;
  out.method = SurrogateMethod::closed_form;
  out.restarts_used = 0;
  out.group_count = 1;
  out.objective_value =
      objective_L(out.scores.omega, data, LinkKind::identity, false, &out.flagged);
  return {out, ci};
}

namespace {

struct StartOutcome {
  Vec omega;             // unit, terminal point
  double value = std::numeric_limits<double>::infinity();
  double start_value = std::numeric_limits<double>::infinity();
  bool usable = false;
  bool flagged = false;
  std::string note;
};

StartOutcome minimize_from(const Vec& v0, const ItemDataset& data, LinkKind link, bool nonuniform,
                           const NumericOptions& opts) {
  StartOutcome out;
  const Eigen::Index k = v0.size();
  try {
    auto value_at = [&](const Vec& v) {
      const double nv = v.norm();
      if (nv < 1e-12) return std::numeric_limits<double>::infinity();
      return objective_L(v / nv, data, link, nonuniform);
    };
    auto grad_at = [&](const Vec& v) {
      const double nv = v.norm();
      return Vec(objective_gradient(v / nv, data, link, nonuniform) / nv);
    };

    Vec x = v0;
    double fx = value_at(x);
    out.start_value = fx;
    Vec g = grad_at(x);
    Mat h = Mat::Identity(k, k);
    for (int it = 0; it < opts.max_iterations; ++it) {
      if (g.lpNorm<Eigen::Infinity>() <= opts.gradient_tol) break;
      Vec dir = -h * g;
      double gd = g.dot(dir);
      if (gd >= 0.0) {
        h.setIdentity();
        dir = -g;
        gd = g.dot(dir);
      }
      double t = 1.0;
      Vec xnew;
      double fnew = 0.0;
      bool accepted = false;
      for (int ls = 0; ls < 45; ++ls) {
        xnew = x + t * dir;
        fnew = value_at(xnew);
        if (std::isfinite(fnew) && fnew <= fx + 1e-4 * t * gd) {
          accepted = true;
          break;
        }
        t *= 0.5;
      }
      if (!accepted) break;
      const Vec gnew = grad_at(xnew);
      const Vec s = xnew - x;
      const Vec y = gnew - g;
      const double sy = s.dot(y);
      if (sy > 1e-12 * s.norm() * y.norm()) {
        const double rho = 1.0 / sy;
        const Mat left = Mat::Identity(k, k) - rho * s * y.transpose();
        h = left * h * left.transpose() + rho * s * s.transpose();
      }
      x = xnew;
      fx = fnew;
      g = gnew;
    }
    out.omega = x / x.norm();
    out.value = objective_L(out.omega, data, link, nonuniform, &out.flagged);
    out.usable = std::isfinite(out.value);
  } catch (const NumericalError& e) {
    out.usable = false;
    out.note = e.what();
  }
  return out;
}

}  // namespace

SurrogateResult numeric_omega(const ItemDataset& data, LinkKind link, bool nonuniform,
                              const NumericOptions& opts, NumericDiag* diag) {
  if (data.k() < 2) throw ConfigError("numeric optimizer needs at least 2 features");
  if (data.m() < 1) throw ConfigError("numeric optimizer needs a grouping column");
  if (opts.restarts < 0) throw ConfigError("restarts must be nonnegative");

  // Random starts from the positive orthant, then the closed form on the
  // same data (first grouping column, identity reduction) as an informed
  // start when it exists.
  std::vector<Vec> starts;
  starts.reserve(static_cast<size_t>(opts.restarts) + 1);
  Rng rng(opts.seed, 0, 0, Rng::starts);
  for (int r = 0; r < opts.restarts; ++r) {
    Vec v(data.k());
    for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = rng.uniform();
    const double nv = v.norm();
    starts.push_back(nv > 0.0 ? Vec(v / nv) : Vec(Vec::Constant(data.k(), 1.0).normalized()));
  }
  bool informed = false;
  try {
    ItemDataset single = data;
    single.groups = data.groups.col(0);
    const ResidualizedData res = residualize(single);
    const ClosedFormIntermediates ci = closed_form_intermediates(res);
    if (ci.condition_holds) {
      starts.push_back(map_back_unit(res, ci.alpha * ci.q1 + ci.beta * ci.q2));
      informed = true;
    }
  } catch (const std::runtime_error&) {
    // No informed start; random starts carry the search.
  }
  if (starts.empty()) throw ConfigError("no start points (restarts = 0 and no closed form)");

  std::vector<StartOutcome> outcomes(starts.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(starts.size()); ++i) {
    outcomes[static_cast<size_t>(i)] =
        minimize_from(starts[static_cast<size_t>(i)], data, link, nonuniform, opts);
  }

  double best = std::numeric_limits<double>::infinity();
  for (const auto& o : outcomes) {
    if (o.usable && o.value < best) best = o.value;
  }
  if (!std::isfinite(best)) {
    std::string note = "all starts failed";
    for (const auto& o : outcomes) {
      if (!o.note.empty()) {
        note += "; " + o.note;
        break;
      }
    }
    throw NumericalError(note);
  }
  // Deterministic reduction: best value wins, ties inside a relative
  // window go to the lowest start index.
  int chosen = -1;
  for (size_t i = 0; i < outcomes.size(); ++i) {
    if (outcomes[i].usable && outcomes[i].value <= best + kTieWindow * (1.0 + std::abs(best))) {
      chosen = static_cast<int>(i);
      break;
    }
  }

  SurrogateResult out;
  out.scores.omega = outcomes[static_cast<size_t>(chosen)].omega;
  out.method = SurrogateMethod::numeric;
  out.restarts_used = static_cast<int>(starts.size());
  out.group_count = static_cast<int>(data.m());
  out.flagged = outcomes[static_cast<size_t>(chosen)].flagged;
  out.objective_value = outcomes[static_cast<size_t>(chosen)].value;

  // Sign canonicalization: the lambda sign symmetry makes omega and
  // -omega equivalent in likelihood; pick the orientation whose
  // residualized surrogate aligns with the sign-corrected residualized
  // first group column.
  const Mat q = intercept_theta_basis(data.theta);
  const Vec yd = data.responses - q * (q.transpose() * data.responses);
  Vec zd = data.groups.col(0) - q * (q.transpose() * data.groups.col(0));
  if (yd.dot(zd) < 0.0) zd = -zd;
  const Vec eta_raw = data.features * out.scores.omega;
  const Vec etad = eta_raw - q * (q.transpose() * eta_raw);
  if (etad.dot(zd) < 0.0) out.scores.omega = -out.scores.omega;
  out.scores.eta = data.features * out.scores.omega;

  if (diag) {
    diag->start_values.clear();
    diag->achieved_values.clear();
    for (const auto& o : outcomes) {
      diag->start_values.push_back(o.start_value);
      diag->achieved_values.push_back(o.value);
    }
    diag->chosen_start = chosen;
    diag->informed_start_used = informed;
  }
  return out;
}

double analytic_gradient_check(const ItemDataset& data, LinkKind link, const Vec& omega,
                               bool nonuniform) {
  require_unit(omega);
  const Vec g = objective_gradient(omega, data, link, nonuniform);
  const double h = 1e-5;
  double worst = 0.0;
  for (Eigen::Index i = 0; i < omega.size(); ++i) {
    Vec vp = omega;
    Vec vm = omega;
    vp(i) += h;
    vm(i) -= h;
    const double fp = objective_L(vp / vp.norm(), data, link, nonuniform);
    const double fm = objective_L(vm / vm.norm(), data, link, nonuniform);
    worst = std::max(worst, std::abs((fp - fm) / (2.0 * h) - g(i)));
  }
  return worst;
}

}  // namespace difproc
