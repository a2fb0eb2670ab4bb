#include "difproc/simulation.hpp"

#include "difproc/model.hpp"
#include "difproc/rng.hpp"
#include "difproc/traits.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace difproc {

namespace {

constexpr double kAppendNoiseSd = 0.1;

// Symmetric inverse square root of the sample covariance, so that the
// whitened block has exactly unit sample covariance.
Mat whitening_map(const Mat& x) {
  const double nm1 = static_cast<double>(x.rows() - 1);
  const Mat centered = x.rowwise() - x.colwise().mean();
  const Mat cov = centered.transpose() * centered / nm1;
  Eigen::SelfAdjointEigenSolver<Mat> es(cov);
  if (es.info() != Eigen::Success) {
    throw NumericalError("sample covariance eigendecomposition failed");
  }
  const Vec& w = es.eigenvalues();
  if (w(0) <= 1e-12 * std::max(w(w.size() - 1), 0.0)) {
    throw NumericalError("sample covariance is singular; need more respondents than features");
  }
  return es.eigenvectors() * w.array().rsqrt().matrix().asDiagonal() *
         es.eigenvectors().transpose();
}

void band(EffectBand effect, double& lo, double& hi) {
  lo = effect == EffectBand::small ? 0.5 : 1.0;
  hi = effect == EffectBand::small ? 1.0 : 1.5;
}

// Per-replication raw metrics, reduced in index order by run_study.
struct RepMetrics {
  bool ok = false;
  std::string error = "unknown failure";
  MseTriple mse;
  std::vector<double> corrs, fib, fia, objb, obja;
  double ssb_u = 0.0;
  double ssb_c = 0.0;
};

RepMetrics one_replication(const SimConfig& cfg, int rep) {
  RepMetrics m;
  const Replication r = generate_replication(cfg, static_cast<std::uint64_t>(rep));

  Mat clean(cfg.n, cfg.j_total - cfg.j_dif);
  for (Eigen::Index j = cfg.j_dif; j < cfg.j_total; ++j) {
    clean.col(j - cfg.j_dif) = r.study.responses.col(j);
  }
  const Vec theta0 = cfg.link == LinkKind::identity ? initial_theta_linear(clean)
                                                    : initial_theta_2pl(clean);

  PipelineConfig pcfg;
  pcfg.link = cfg.link;
  pcfg.nonuniform = cfg.nonuniform;
  pcfg.seed = mix_seed(cfg.seed, static_cast<std::uint64_t>(rep), 0, Rng::starts);
  for (Eigen::Index j = cfg.j_dif; j < cfg.j_total; ++j) pcfg.anchor_items.push_back(j);

  std::vector<Eigen::Index> dif(static_cast<size_t>(cfg.j_dif));
  std::iota(dif.begin(), dif.end(), 0);
  const CorrectionResult cr = run_correction(r.study, pcfg, theta0, dif);

  std::vector<ItemParams> estimates;
  for (size_t i = 0; i < cr.corrections.size(); ++i) {
    const ItemCorrection& c = cr.corrections[i];
    ItemParams p;
    p.link = cfg.link;
    p.d = c.refit.d();
    p.a0 = c.refit.a0();
    p.a1 = c.refit.a1();
    estimates.push_back(p);
    m.corrs.push_back(corr_eta(c.scores.eta, r.truth.eta[i]));
    m.fib.push_back(c.info_before);
    m.fia.push_back(c.info_after);
    m.objb.push_back(c.objective_before);
    m.obja.push_back(c.objective_after);
  }
  m.mse = mse_items(estimates, r.truth, dif);

  // Bias comparison on the affected items alone: both calibrations score
  // the same response columns, differing only in the surrogate term.
  const Vec th_u = score_traits(cr.bank_uncorrected, r.study.responses, dif);
  const Vec th_c = score_traits(cr.bank, r.study.responses, dif);
  m.ssb_u = ssb(th_u, r.truth.theta, r.study.groups.col(0));
  m.ssb_c = ssb(th_c, r.truth.theta, r.study.groups.col(0));
  m.ok = true;
  return m;
}

Vec to_vec(const std::vector<double>& v) {
  return Eigen::Map<const Vec>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace

void SimConfig::validate() const {
  if (n < 30) throw ConfigError("sample size below 30 leaves no room for calibration");
  if (n <= k + 1) throw ConfigError("sample size must exceed the feature count plus one");
  if (j_total < 1) throw ConfigError("need at least one item");
  if (j_dif < 0 || j_dif >= j_total) {
    throw ConfigError("affected items must number fewer than the total");
  }
  if (k < 1) throw ConfigError("need at least one feature column");
  if (replications < 1) throw ConfigError("need at least one replication");
  if (link != LinkKind::identity && link != LinkKind::logit) {
    throw ConfigError("simulated studies support the identity and logit links");
  }
}

Replication generate_replication(const SimConfig& cfg, std::uint64_t rep,
                                 const GenHooks* hooks) {
  cfg.validate();
  const Eigen::Index n = cfg.n;
  const Eigen::Index nf = static_cast<Eigen::Index>(std::lround(static_cast<double>(n) / 3.0));
  Rng rng(cfg.seed, rep, 0, Rng::generate);

  Replication out;
  StudyData& s = out.study;
  SimTruth& t = out.truth;

  s.groups.resize(n, 1);
  for (Eigen::Index i = 0; i < n; ++i) s.groups(i, 0) = i >= n - nf ? 1.0 : 0.0;
  t.theta.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) t.theta(i) = rng.normal();

  t.d.resize(cfg.j_total);
  t.a0.resize(cfg.j_total);
  t.a1 = Vec::Zero(cfg.j_total);
  for (Eigen::Index j = 0; j < cfg.j_total; ++j) t.d(j) = rng.uniform(-1.0, 1.0);
  for (Eigen::Index j = 0; j < cfg.j_total; ++j) t.a0(j) = rng.uniform(1.0, 2.0);
  double lo, hi;
  band(cfg.dif_effect, lo, hi);
  for (Eigen::Index j = 0; j < cfg.j_dif; ++j) t.a1(j) = rng.uniform(lo, hi);
  if (cfg.nonuniform) t.gamma.resize(cfg.j_total);

  s.responses.resize(n, cfg.j_total);
  s.features.resize(static_cast<size_t>(cfg.j_total));
  if (hooks && hooks->raw_features) hooks->raw_features->clear();

  for (Eigen::Index j = 0; j < cfg.j_total; ++j) {
    // Every item's features are group-shifted; under the slope-dependent
    // design every item also gets its own rate, affected or not.
    double gamma = 0.0;
    if (cfg.nonuniform) {
      gamma = hooks && hooks->gamma_override ? *hooks->gamma_override : rng.exponential();
      t.gamma(j) = gamma;
    }
    Mat x(n, cfg.k);
    for (Eigen::Index i = 0; i < n; ++i) {
      double shift = s.groups(i, 0) == 0.0 ? 1.0 : -1.0;
      if (cfg.nonuniform) shift += gamma * t.theta(i) * s.groups(i, 0);
      for (Eigen::Index c = 0; c < cfg.k; ++c) x(i, c) = shift + rng.normal();
    }
    if (hooks && hooks->raw_features) hooks->raw_features->push_back(x);
    x = (x * whitening_map(x)).eval();

    Vec eta = Vec::Zero(n);
    if (j < cfg.j_dif) {
      Vec omega(cfg.k);
      for (Eigen::Index c = 0; c < cfg.k; ++c) omega(c) = rng.exponential();
      omega.normalize();
      eta = x * omega;
      t.omega.push_back(omega);
      t.eta.push_back(eta);
    }

    const Vec lp = Vec::Constant(n, t.d(j)) + t.a0(j) * t.theta + t.a1(j) * eta;
    if (cfg.link == LinkKind::identity) {
      for (Eigen::Index i = 0; i < n; ++i) s.responses(i, j) = lp(i) + rng.normal();
      Mat xa(n, cfg.k + 1);
      xa.leftCols(cfg.k) = x;
      for (Eigen::Index i = 0; i < n; ++i) {
        xa(i, cfg.k) = s.responses(i, j) + kAppendNoiseSd * rng.normal();
      }
      s.features[static_cast<size_t>(j)] = std::move(xa);
    } else {
      for (Eigen::Index i = 0; i < n; ++i) {
        s.responses(i, j) = rng.uniform() < sigmoid(lp(i)) ? 1.0 : 0.0;
      }
      s.features[static_cast<size_t>(j)] = std::move(x);
    }
  }
  return out;
}

MseTriple mse_items(const std::vector<ItemParams>& estimates, const SimTruth& truth,
                    const std::vector<Eigen::Index>& items) {
  if (estimates.size() != items.size()) {
    throw ConfigError("estimate list does not match the item list");
  }
  if (items.empty()) throw ConfigError("no items to evaluate");
  MseTriple out;
  for (size_t i = 0; i < items.size(); ++i) {
    const Eigen::Index j = items[i];
    if (j < 0 || j >= truth.d.size()) {
      throw ConfigError("evaluated item " + std::to_string(j) + " is out of range");
    }
    const double ed = estimates[i].d - truth.d(j);
    const double e0 = estimates[i].a0 - truth.a0(j);
    const double e1 = estimates[i].a1 - truth.a1(j);
    out.d += ed * ed;
    out.a0 += e0 * e0;
    out.a1 += e1 * e1;
  }
  const double count = static_cast<double>(items.size());
  out.d /= count;
  out.a0 /= count;
  out.a1 /= count;
  return out;
}

double corr_eta(const Vec& eta_hat, const Vec& eta_true) {
  if (eta_hat.size() != eta_true.size() || eta_hat.size() < 2) {
    throw DataError("correlation needs two series of equal length at least 2");
  }
  const Vec a = eta_hat.array() - eta_hat.mean();
  const Vec b = eta_true.array() - eta_true.mean();
  const double va = a.squaredNorm();
  const double vb = b.squaredNorm();
  const double floor_a = 1e-24 * std::max(1.0, eta_hat.cwiseAbs().maxCoeff());
  const double floor_b = 1e-24 * std::max(1.0, eta_true.cwiseAbs().maxCoeff());
  if (va <= floor_a || vb <= floor_b) {
    throw DataError("correlation undefined for a constant series");
  }
  return std::abs(a.dot(b)) / std::sqrt(va * vb);
}

double ssb(const Vec& theta_est, const Vec& theta_true, const Vec& group) {
  const Eigen::Index n = theta_est.size();
  if (theta_true.size() != n || group.size() != n || n < 2) {
    throw DataError("bias decomposition needs matching series of length at least 2");
  }
  double nr = 0.0, nf = 0.0, sum_r = 0.0, sum_f = 0.0;
  const Vec nu = theta_est - theta_true;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (group(i) == 0.0) {
      nr += 1.0;
      sum_r += nu(i);
    } else if (group(i) == 1.0) {
      nf += 1.0;
      sum_f += nu(i);
    } else {
      throw DataError("group column is not coded 0/1");
    }
  }
  if (nr == 0.0 || nf == 0.0) throw DataError("bias decomposition needs both groups");
  const double overall = nu.mean();
  const double dr = sum_r / nr - overall;
  const double df = sum_f / nf - overall;
  return nr * dr * dr + nf * df * df;
}

EvalReport run_study(const SimConfig& cfg) {
  cfg.validate();
  if (cfg.j_dif < 1) throw ConfigError("a study needs at least one affected item");
  if (cfg.j_total - cfg.j_dif < 3) {
    throw ConfigError("a study needs at least three clean items for initial traits");
  }

  std::vector<RepMetrics> slots(static_cast<size_t>(cfg.replications));
#pragma omp parallel for schedule(dynamic)
  for (int rep = 0; rep < cfg.replications; ++rep) {
    try {
      slots[static_cast<size_t>(rep)] = one_replication(cfg, rep);
    } catch (const std::exception& e) {
      slots[static_cast<size_t>(rep)].error = e.what();
    } catch (...) {
      // leave the default message
    }
  }

  EvalReport report;
  std::vector<double> corrs, fib, fia, objb, obja, ssbu, ssbc;
  for (int rep = 0; rep < cfg.replications; ++rep) {
    RepMetrics& m = slots[static_cast<size_t>(rep)];
    if (!m.ok) {
      report.failures.push_back({rep, m.error});
      continue;
    }
    ++report.replications;
    report.mse_d += m.mse.d;
    report.mse_a0 += m.mse.a0;
    report.mse_a1 += m.mse.a1;
    corrs.insert(corrs.end(), m.corrs.begin(), m.corrs.end());
    fib.insert(fib.end(), m.fib.begin(), m.fib.end());
    fia.insert(fia.end(), m.fia.begin(), m.fia.end());
    objb.insert(objb.end(), m.objb.begin(), m.objb.end());
    obja.insert(obja.end(), m.obja.begin(), m.obja.end());
    ssbu.push_back(m.ssb_u);
    ssbc.push_back(m.ssb_c);
  }
  if (report.replications > 0) {
    const double done = static_cast<double>(report.replications);
    report.mse_d /= done;
    report.mse_a0 /= done;
    report.mse_a1 /= done;
    report.corr_eta =
        std::accumulate(corrs.begin(), corrs.end(), 0.0) / static_cast<double>(corrs.size());
  }
  report.fi_before = to_vec(fib);
  report.fi_after = to_vec(fia);
  report.objective_before = to_vec(objb);
  report.objective_after = to_vec(obja);
  report.ssb_uncorrected = to_vec(ssbu);
  report.ssb_corrected = to_vec(ssbc);
  return report;
}

}  // namespace difproc
