#include "difproc/pipeline.hpp"

#include "difproc/model.hpp"
#include "difproc/rng.hpp"

#include <Eigen/QR>

#include <algorithm>
#include <cmath>
#include <set>
#include <string>

namespace difproc {

namespace {

bool is_binary_link(LinkKind link) { return link != LinkKind::identity; }

Mat thin_basis(const Vec& theta) {
  const Eigen::Index n = theta.size();
  Mat b(n, 2);
  b.col(0).setOnes();
  b.col(1) = theta;
  Eigen::HouseholderQR<Mat> qr(b);
  return qr.householderQ() * Mat::Identity(n, 2);
}

Mat detection_design(const Vec& theta0, const Vec& z) {
  Mat x(theta0.size(), 3);
  x.col(0).setOnes();
  x.col(1) = theta0;
  x.col(2) = z;
  return x;
}

ItemParams plain_params(LinkKind link, const GlmFit& fit) {
  ItemParams p;
  p.link = link;
  p.d = fit.d();
  p.a0 = fit.a0();
  p.a1 = 0.0;
  p.sigma2 = link == LinkKind::identity ? fit.sigma2 : 1.0;
  return p;
}

}  // namespace

void StudyData::validate(bool binary_responses) const {
  const Eigen::Index rows = n();
  if (rows < 2) throw DataError("study needs at least 2 respondents");
  if (item_count() < 1) throw DataError("study needs at least 1 item");
  if (groups.rows() != rows) throw DataError("group rows do not match the respondent count");
  if (group_count() < 1) throw DataError("study needs at least one grouping column");
  if (static_cast<Eigen::Index>(features.size()) != item_count()) {
    throw DataError("feature blocks do not match the item count");
  }
  for (size_t j = 0; j < features.size(); ++j) {
    if (features[j].size() != 0 && features[j].rows() != rows) {
      throw DataError("feature rows of item " + std::to_string(j) +
                      " do not match the respondent count");
    }
    if (features[j].size() != 0 && !features[j].allFinite()) {
      throw DataError("features of item " + std::to_string(j) + " contain non-finite values");
    }
  }
  if (!responses.allFinite()) throw DataError("responses contain non-finite values");
  if (!groups.allFinite()) throw DataError("groups contain non-finite values");
  for (Eigen::Index m = 0; m < group_count(); ++m) {
    bool seen0 = false, seen1 = false;
    for (Eigen::Index i = 0; i < rows; ++i) {
      const double g = groups(i, m);
      if (g == 0.0) {
        seen0 = true;
      } else if (g == 1.0) {
        seen1 = true;
      } else {
        throw DataError("group column " + std::to_string(m) + " is not coded 0/1");
      }
    }
    if (!seen0 || !seen1) {
      throw DataError("group column " + std::to_string(m) + " does not contain both groups");
    }
  }
  if (binary_responses) {
    for (Eigen::Index j = 0; j < item_count(); ++j) {
      for (Eigen::Index i = 0; i < rows; ++i) {
        const double y = responses(i, j);
        if (y != 0.0 && y != 1.0) {
          throw DataError("binary link requires responses in {0, 1}");
        }
      }
    }
  }
}

void PipelineConfig::validate(const StudyData& data) const {
  if (anchor_items.size() < 3) throw ConfigError("need at least 3 anchor items");
  std::set<Eigen::Index> seen;
  for (const Eigen::Index a : anchor_items) {
    if (a < 0 || a >= data.item_count()) {
      throw ConfigError("anchor item " + std::to_string(a) + " is out of range");
    }
    if (!seen.insert(a).second) {
      throw ConfigError("anchor item " + std::to_string(a) + " is listed twice");
    }
  }
  if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("alpha must lie strictly in (0, 1)");
  if (restarts < 0) throw ConfigError("restarts must be nonnegative");
}

DetectionResult run_detection(const StudyData& data, const PipelineConfig& cfg) {
  data.validate(is_binary_link(cfg.link));
  cfg.validate(data);

  Mat anchor_responses(data.n(), static_cast<Eigen::Index>(cfg.anchor_items.size()));
  for (size_t a = 0; a < cfg.anchor_items.size(); ++a) {
    anchor_responses.col(static_cast<Eigen::Index>(a)) = data.responses.col(cfg.anchor_items[a]);
  }

  DetectionResult out;
  out.theta0 = cfg.link == LinkKind::identity ? initial_theta_linear(anchor_responses)
                                              : initial_theta_2pl(anchor_responses);

  std::set<Eigen::Index> anchors(cfg.anchor_items.begin(), cfg.anchor_items.end());
  std::set<Eigen::Index> flagged_items;
  for (Eigen::Index j = 0; j < data.item_count(); ++j) {
    if (anchors.count(j)) continue;
    for (Eigen::Index m = 0; m < data.group_count(); ++m) {
      DetectionTest test;
      test.item = j;
      test.group = m;
      const Mat x = detection_design(out.theta0, data.groups.col(m));
      const GlmFit fit = fit_glm(cfg.link, data.responses.col(j), x);
      if (fit.converged) {
        const WaldResult w = wald_test(fit, 2);
        test.estimate = w.estimate;
        test.se = w.se;
        test.z = w.z;
        test.p_value = w.p_value;
        test.flagged = w.p_value < cfg.alpha;
      } else {
        // A fit that cannot settle (typically separation: the group
        // splits the responses perfectly) is the strongest possible
        // group effect, so the item is flagged rather than skipped.
        test.estimate = fit.coef.size() > 2 ? fit.coef(2) : 0.0;
        test.p_value = 0.0;
        test.flagged = true;
        test.degenerate = true;
      }
      if (test.flagged) flagged_items.insert(j);
      out.tests.push_back(test);
    }
  }
  out.dif_items.assign(flagged_items.begin(), flagged_items.end());
  return out;
}

CorrectionResult run_correction(const StudyData& data, const PipelineConfig& cfg,
                                const Vec& theta0,
                                const std::vector<Eigen::Index>& dif_items) {
  data.validate(is_binary_link(cfg.link));
  cfg.validate(data);
  if (theta0.size() != data.n()) {
    throw DataError("initial traits do not match the respondent count");
  }

  std::vector<Eigen::Index> targets = dif_items;
  std::sort(targets.begin(), targets.end());
  targets.erase(std::unique(targets.begin(), targets.end()), targets.end());
  for (const Eigen::Index j : targets) {
    if (j < 0 || j >= data.item_count()) {
      throw ConfigError("corrected item " + std::to_string(j) + " is out of range");
    }
    if (data.features[static_cast<size_t>(j)].size() == 0) {
      throw DataError("item " + std::to_string(j) + " has no features to build a surrogate from");
    }
  }

  CorrectionResult out;
  out.theta0 = theta0;

  // Baseline calibration of every item on (1, theta0); it seeds both the
  // uncorrected bank and the clean entries of the corrected one.
  Mat base(data.n(), 2);
  base.col(0).setOnes();
  base.col(1) = theta0;
  out.bank_uncorrected.items.resize(static_cast<size_t>(data.item_count()));
  for (Eigen::Index j = 0; j < data.item_count(); ++j) {
    const GlmFit fit0 = fit_glm(cfg.link, data.responses.col(j), base);
    out.bank_uncorrected.items[static_cast<size_t>(j)].params = plain_params(cfg.link, fit0);
  }
  out.bank_uncorrected.dif_items = targets;
  out.bank.items = out.bank_uncorrected.items;
  out.bank.dif_items = targets;

  const Mat q = thin_basis(theta0);
  const bool closed_eligible =
      cfg.link == LinkKind::identity && data.group_count() == 1 && !cfg.nonuniform;

  for (const Eigen::Index j : targets) {
    ItemDataset ds;
    ds.responses = data.responses.col(j);
    ds.features = data.features[static_cast<size_t>(j)];
    ds.groups = data.groups;
    ds.theta = theta0;

    ItemCorrection corr;
    corr.item = j;

    bool solved = false;
    if (closed_eligible) {
      try {
        const ResidualizedData res = residualize(ds);
        const SurrogateResult sr = closed_form_omega(ds, res).first;
        corr.scores = sr.scores;
        corr.method = sr.method;
        corr.objective_after = sr.objective_value;
        corr.surrogate_flagged = sr.flagged;
        solved = true;
      } catch (const NumericalError&) {
        // No interior zero or degenerate geometry; the optimizer decides.
      } catch (const DataError&) {
        // Residualization refused the features; the optimizer may still
        // make progress on the raw block.
      }
    }
    if (!solved) {
      NumericOptions opts;
      opts.restarts = cfg.restarts;
      opts.seed = mix_seed(cfg.seed, 0, static_cast<std::uint64_t>(j),
                           static_cast<std::uint64_t>(Rng::starts));
      const SurrogateResult sr = numeric_omega(ds, cfg.link, cfg.nonuniform, opts);
      corr.scores = sr.scores;
      corr.method = sr.method;
      corr.objective_after = sr.objective_value;
      corr.surrogate_flagged = sr.flagged;
    }

    corr.objective_before = objective_without_nuisance(ds, cfg.link, cfg.nonuniform);
    corr.eta_used = cfg.link == LinkKind::identity
                        ? Vec(corr.scores.eta - q * (q.transpose() * corr.scores.eta))
                        : corr.scores.eta;

    Mat design(data.n(), 3);
    design.col(0).setOnes();
    design.col(1) = theta0;
    design.col(2) = corr.eta_used;
    corr.refit = fit_glm(cfg.link, ds.responses, design);
    corr.refit.has_nuisance = true;

    BankItem& bank_item = out.bank.items[static_cast<size_t>(j)];
    bank_item.params.link = cfg.link;
    bank_item.params.d = corr.refit.d();
    bank_item.params.a0 = corr.refit.a0();
    bank_item.params.a1 = corr.refit.a1();
    bank_item.params.sigma2 = cfg.link == LinkKind::identity ? corr.refit.sigma2 : 1.0;
    bank_item.eta = corr.eta_used;

    corr.info_before =
        mean_item_information(out.bank_uncorrected.items[static_cast<size_t>(j)], theta0);
    corr.info_after = mean_item_information(bank_item, theta0);
    out.corrections.push_back(std::move(corr));
  }

  out.theta_corrected = score_traits(out.bank, data.responses);
  return out;
}

double residual_nuisance(const CorrectionResult& result) {
  double worst = 0.0;
  for (const ItemCorrection& corr : result.corrections) {
    worst = std::max(worst, std::abs(corr.objective_after));
  }
  return worst;
}

}  // namespace difproc
