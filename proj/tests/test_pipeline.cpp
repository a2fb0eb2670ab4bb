#include "difproc/pipeline.hpp"

#include "difproc/model.hpp"
#include "difproc/rng.hpp"
#include "difproc/traits.hpp"
#include "test_util.hpp"

#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <vector>

using difproc::ConfigError;
using difproc::CorrectionResult;
using difproc::DataError;
using difproc::DetectionResult;
using difproc::ItemCorrection;
using difproc::LinkKind;
using difproc::Mat;
using difproc::PipelineConfig;
using difproc::Rng;
using difproc::StudyData;
using difproc::SurrogateMethod;
using difproc::Vec;

namespace {

double correlation(const Vec& a, const Vec& b) {
  const Vec ac = a.array() - a.mean();
  const Vec bc = b.array() - b.mean();
  return ac.dot(bc) / std::sqrt(ac.squaredNorm() * bc.squaredNorm());
}

bool same_bits(const Vec& a, const Vec& b) {
  if (a.size() != b.size()) return false;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    if (a(i) != b(i)) return false;
  }
  return true;
}

struct StudyTruth {
  Vec theta;
  std::vector<double> d;
  std::vector<double> a0;
  std::vector<double> a1;       // zero for clean items
  std::vector<Vec> eta;         // empty for clean items
};

// Shared-trait study: the first j_dif items carry a feature-driven group
// effect (group-shifted Gaussian features, exponential weights), the rest
// are clean and get no feature block. Identity studies append a noisy
// copy of the response to each affected item's features, mirroring the
// single-item helper.
StudyData make_study(Rng& rng, Eigen::Index n, Eigen::Index j_total, Eigen::Index j_dif,
                     Eigen::Index k, double a1_lo, double a1_hi, bool binary,
                     StudyTruth* truth = nullptr) {
  const Eigen::Index nf = static_cast<Eigen::Index>(std::lround(static_cast<double>(n) / 3.0));
  StudyData s;
  s.groups.resize(n, 1);
  Vec theta(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    s.groups(i, 0) = i >= n - nf ? 1.0 : 0.0;
    theta(i) = rng.normal();
  }
  s.responses.resize(n, j_total);
  s.features.resize(static_cast<size_t>(j_total));
  StudyTruth local;
  local.theta = theta;
  for (Eigen::Index j = 0; j < j_total; ++j) {
    const double d = rng.uniform(-1.0, 1.0);
    const double a0 = rng.uniform(1.0, 2.0);
    const double a1 = j < j_dif ? rng.uniform(a1_lo, a1_hi) : 0.0;
    Vec lp = Vec::Constant(n, d) + a0 * theta;
    Vec eta;
    Mat x;
    if (j < j_dif) {
      x.resize(n, k);
      for (Eigen::Index i = 0; i < n; ++i) {
        const double mu = s.groups(i, 0) == 0.0 ? 1.0 : -1.0;
        for (Eigen::Index c = 0; c < k; ++c) x(i, c) = mu + rng.normal();
      }
      Vec omega(k);
      for (Eigen::Index c = 0; c < k; ++c) omega(c) = rng.exponential();
      omega.normalize();
      eta = x * omega;
      lp += a1 * eta;
    }
    for (Eigen::Index i = 0; i < n; ++i) {
      s.responses(i, j) = binary ? (rng.uniform() < difproc::sigmoid(lp(i)) ? 1.0 : 0.0)
                                 : lp(i) + rng.normal();
    }
    if (j < j_dif) {
      if (binary) {
        s.features[static_cast<size_t>(j)] = x;
      } else {
        Mat xa(n, k + 1);
        xa.leftCols(k) = x;
        for (Eigen::Index i = 0; i < n; ++i) {
          xa(i, k) = s.responses(i, j) + 0.1 * rng.normal();
        }
        s.features[static_cast<size_t>(j)] = xa;
      }
    }
    local.d.push_back(d);
    local.a0.push_back(a0);
    local.a1.push_back(a1);
    local.eta.push_back(eta);
  }
  if (truth) *truth = local;
  return s;
}

// Second grouping column, alternating rows, unrelated to the first.
void add_alternating_group(StudyData& s) {
  Mat g(s.n(), 2);
  g.col(0) = s.groups.col(0);
  for (Eigen::Index i = 0; i < s.n(); ++i) g(i, 1) = i % 2 == 0 ? 0.0 : 1.0;
  s.groups = g;
}

PipelineConfig identity_config(std::vector<Eigen::Index> anchors) {
  PipelineConfig cfg;
  cfg.link = LinkKind::identity;
  cfg.anchor_items = std::move(anchors);
  return cfg;
}

}  // namespace

TEST_CASE("study and config validation reject malformed inputs") {
  Rng rng(11, 0, 0, Rng::scratch);
  const StudyData good = make_study(rng, 60, 5, 2, 3, 0.5, 1.0, false);
  CHECK_NOTHROW(good.validate(false));

  {
    StudyData s = good;
    s.responses = s.responses.topRows(1).eval();
    CHECK_THROWS_AS(s.validate(false), DataError);
  }
  {
    StudyData s = good;
    s.responses = Mat(s.n(), 0);
    s.features.clear();
    CHECK_THROWS_AS(s.validate(false), DataError);
  }
  {
    StudyData s = good;
    s.groups = s.groups.topRows(s.n() - 1).eval();
    CHECK_THROWS_AS(s.validate(false), DataError);
  }
  {
    StudyData s = good;
    s.features.pop_back();
    CHECK_THROWS_AS(s.validate(false), DataError);
  }
  {
    StudyData s = good;
    s.features[0] = Mat::Zero(s.n() - 1, 3);
    CHECK_THROWS_AS(s.validate(false), DataError);
  }
  {
    StudyData s = good;
    s.features[0](2, 1) = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(s.validate(false), DataError);
  }
  {
    StudyData s = good;
    s.responses(0, 0) = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(s.validate(false), DataError);
  }
  {
    StudyData s = good;
    s.groups(4, 0) = 2.0;
    CHECK_THROWS_AS(s.validate(false), DataError);
  }
  {
    StudyData s = good;
    s.groups.col(0).setZero();
    CHECK_THROWS_AS(s.validate(false), DataError);
  }
  // Gaussian responses are not 0/1, so the binary check must refuse them.
  CHECK_THROWS_AS(good.validate(true), DataError);

  PipelineConfig cfg = identity_config({2, 3, 4});
  CHECK_NOTHROW(cfg.validate(good));
  {
    PipelineConfig c = cfg;
    c.anchor_items = {2, 3};
    CHECK_THROWS_AS(c.validate(good), ConfigError);
  }
  {
    PipelineConfig c = cfg;
    c.anchor_items = {2, 3, 5};
    CHECK_THROWS_AS(c.validate(good), ConfigError);
  }
  {
    PipelineConfig c = cfg;
    c.anchor_items = {2, 3, -1};
    CHECK_THROWS_AS(c.validate(good), ConfigError);
  }
  {
    PipelineConfig c = cfg;
    c.anchor_items = {2, 3, 3};
    CHECK_THROWS_AS(c.validate(good), ConfigError);
  }
  {
    PipelineConfig c = cfg;
    c.alpha = 0.0;
    CHECK_THROWS_AS(c.validate(good), ConfigError);
    c.alpha = 1.0;
    CHECK_THROWS_AS(c.validate(good), ConfigError);
  }
  {
    PipelineConfig c = cfg;
    c.restarts = -1;
    CHECK_THROWS_AS(c.validate(good), ConfigError);
  }
}

TEST_CASE("detection enumerates every non-anchor item and group column") {
  Rng rng(23, 0, 0, Rng::generate);
  StudyData s = make_study(rng, 240, 8, 2, 4, 0.5, 1.0, false);
  add_alternating_group(s);
  const PipelineConfig cfg = identity_config({3, 4, 5, 6});

  const DetectionResult det = run_detection(s, cfg);
  REQUIRE(det.theta0.size() == s.n());
  REQUIRE(det.tests.size() == 8);  // 4 non-anchor items x 2 group columns

  const std::vector<Eigen::Index> expect_items = {0, 0, 1, 1, 2, 2, 7, 7};
  for (size_t t = 0; t < det.tests.size(); ++t) {
    CHECK(det.tests[t].item == expect_items[t]);
    CHECK(det.tests[t].group == static_cast<Eigen::Index>(t % 2));
    CHECK(det.tests[t].p_value >= 0.0);
    CHECK(det.tests[t].p_value <= 1.0);
    CHECK(det.tests[t].flagged == (det.tests[t].p_value < cfg.alpha));
  }
  CHECK(std::is_sorted(det.dif_items.begin(), det.dif_items.end()));
  for (const Eigen::Index j : det.dif_items) {
    bool found = false;
    for (const auto& t : det.tests) found = found || (t.item == j && t.flagged);
    CHECK(found);
  }

  // The initial traits are exactly the factor scores of the anchor block.
  Mat anchors(s.n(), 4);
  for (Eigen::Index a = 0; a < 4; ++a) anchors.col(a) = s.responses.col(3 + a);
  CHECK(same_bits(det.theta0, difproc::initial_theta_linear(anchors)));
}

TEST_CASE("detection keeps its level on clean items and respects alpha") {
  int tested = 0;
  int flagged = 0;
  for (int rep = 0; rep < 50; ++rep) {
    Rng rng(31, static_cast<std::uint64_t>(rep), 0, Rng::generate);
    const StudyData s = make_study(rng, 400, 8, 0, 4, 0.5, 1.0, false);
    const DetectionResult det = run_detection(s, identity_config({0, 1, 2, 3}));
    for (const auto& t : det.tests) {
      ++tested;
      flagged += t.flagged ? 1 : 0;
      CHECK_FALSE(t.degenerate);
    }
  }
  REQUIRE(tested == 200);
  const double rate = static_cast<double>(flagged) / tested;
  CHECK(rate <= 0.15);

  // A vanishing level flags nothing on null items.
  int strict_flags = 0;
  for (int rep = 0; rep < 5; ++rep) {
    Rng rng(37, static_cast<std::uint64_t>(rep), 0, Rng::generate);
    const StudyData s = make_study(rng, 400, 8, 0, 4, 0.5, 1.0, false);
    PipelineConfig cfg = identity_config({0, 1, 2, 3});
    cfg.alpha = 1e-12;
    const DetectionResult det = run_detection(s, cfg);
    for (const auto& t : det.tests) strict_flags += t.flagged ? 1 : 0;
    CHECK(det.dif_items.empty() == (strict_flags == 0));
  }
  CHECK(strict_flags == 0);
}

TEST_CASE("detection flags strong feature-driven group effects") {
  for (int rep = 0; rep < 10; ++rep) {
    Rng rng(41, static_cast<std::uint64_t>(rep), 0, Rng::generate);
    const StudyData s = make_study(rng, 400, 8, 4, 4, 1.0, 1.5, false);
    const DetectionResult det = run_detection(s, identity_config({4, 5, 6, 7}));
    REQUIRE(det.tests.size() == 4);
    for (const auto& t : det.tests) {
      CHECK(t.flagged);
      // The affected group sits at feature mean -1, so its advantage on
      // the response is negative.
      CHECK(t.estimate < 0.0);
    }
    CHECK(det.dif_items == std::vector<Eigen::Index>{0, 1, 2, 3});
  }

  Rng rng(43, 0, 0, Rng::generate);
  const StudyData s = make_study(rng, 1500, 8, 4, 4, 1.0, 1.5, true);
  PipelineConfig cfg = identity_config({4, 5, 6, 7});
  cfg.link = LinkKind::logit;
  const DetectionResult det = run_detection(s, cfg);
  for (const auto& t : det.tests) CHECK(t.flagged);

  Mat anchors(s.n(), 4);
  for (Eigen::Index a = 0; a < 4; ++a) anchors.col(a) = s.responses.col(4 + a);
  CHECK(same_bits(det.theta0, difproc::initial_theta_2pl(anchors)));
}

TEST_CASE("detection flags items whose fit degenerates") {
  Rng rng(47, 0, 0, Rng::generate);
  StudyData s = make_study(rng, 300, 6, 0, 3, 0.5, 1.0, true);
  PipelineConfig cfg = identity_config({0, 1, 2});
  cfg.link = LinkKind::logit;
  // Item 3 is a step function of the initial traits: the responses are
  // perfectly separated along the trait axis and the logistic fit runs
  // into its linear-predictor cap instead of settling.
  Mat anchors(s.n(), 3);
  for (Eigen::Index a = 0; a < 3; ++a) anchors.col(a) = s.responses.col(a);
  const Vec theta0 = difproc::initial_theta_2pl(anchors);
  for (Eigen::Index i = 0; i < s.n(); ++i) s.responses(i, 3) = theta0(i) > 0.0 ? 1.0 : 0.0;

  const DetectionResult det = run_detection(s, cfg);
  bool seen = false;
  for (const auto& t : det.tests) {
    if (t.item != 3) continue;
    seen = true;
    CHECK(t.degenerate);
    CHECK(t.flagged);
    CHECK(t.p_value == 0.0);
  }
  REQUIRE(seen);
  CHECK(std::find(det.dif_items.begin(), det.dif_items.end(), 3) != det.dif_items.end());
}

TEST_CASE("identity correction removes the group effect through the closed form") {
  Rng rng(53, 0, 0, Rng::generate);
  StudyTruth truth;
  const StudyData s = make_study(rng, 500, 8, 4, 6, 1.0, 1.5, false, &truth);
  const PipelineConfig cfg = identity_config({4, 5, 6, 7});

  const DetectionResult det = run_detection(s, cfg);
  REQUIRE(det.dif_items == std::vector<Eigen::Index>{0, 1, 2, 3});

  const CorrectionResult out = run_correction(s, cfg, det.theta0, det.dif_items);
  REQUIRE(out.corrections.size() == 4);
  REQUIRE(out.bank.items.size() == 8);
  REQUIRE(out.bank_uncorrected.items.size() == 8);
  CHECK(out.bank.dif_items == det.dif_items);
  CHECK(same_bits(out.theta0, det.theta0));

  Mat basis(s.n(), 2);
  basis.col(0).setOnes();
  basis.col(1) = det.theta0;

  for (const ItemCorrection& c : out.corrections) {
    CHECK(c.method == SurrogateMethod::closed_form);
    CHECK(c.scores.omega.norm() == doctest::Approx(1.0).epsilon(1e-10));
    CHECK(std::abs(c.objective_after) <= 1e-8);
    CHECK(c.objective_before > 1.0);

    // The raw surrogate is the feature block at the returned weights.
    const Mat& x = s.features[static_cast<size_t>(c.item)];
    CHECK((x * c.scores.omega - c.scores.eta).norm() <= 1e-10 * (1.0 + c.scores.eta.norm()));

    // Identity refits recalibrate on the surrogate with the trait part
    // projected out, so it is orthogonal to both basis columns.
    CHECK(std::abs(basis.col(0).dot(c.eta_used)) <= 1e-6 * s.n());
    CHECK(std::abs(basis.col(1).dot(c.eta_used)) <= 1e-6 * s.n());

    CHECK(c.refit.converged);
    CHECK(c.refit.has_nuisance);
    CHECK(c.info_after >= c.info_before);

    const auto& corrected = out.bank.items[static_cast<size_t>(c.item)];
    CHECK(corrected.params.a1 == c.refit.a1());
    CHECK(corrected.params.d == c.refit.d());
    CHECK(corrected.params.a0 == c.refit.a0());
    CHECK(same_bits(corrected.eta, c.eta_used));
    CHECK(out.bank_uncorrected.items[static_cast<size_t>(c.item)].params.a1 == 0.0);

    // The surrogate tracks the generating nuisance and its recovered
    // slope lands near the generating one. (The intercept is not
    // comparable: it absorbs the projected-out part of the surrogate.)
    const size_t j = static_cast<size_t>(c.item);
    CHECK(std::abs(correlation(c.scores.eta, truth.eta[j])) > 0.8);
    CHECK(std::abs(std::abs(c.refit.a1()) - truth.a1[j]) < 0.5);
  }

  // Clean items enter both banks with identical calibrations.
  for (Eigen::Index j = 4; j < 8; ++j) {
    const auto& a = out.bank.items[static_cast<size_t>(j)];
    const auto& b = out.bank_uncorrected.items[static_cast<size_t>(j)];
    CHECK(a.params.d == b.params.d);
    CHECK(a.params.a0 == b.params.a0);
    CHECK(a.params.sigma2 == b.params.sigma2);
    CHECK(a.params.a1 == 0.0);
    CHECK(a.eta.size() == 0);
  }

  REQUIRE(out.theta_corrected.size() == s.n());
  CHECK(correlation(out.theta_corrected, truth.theta) > 0.9);

  double worst = 0.0;
  for (const auto& c : out.corrections) worst = std::max(worst, std::abs(c.objective_after));
  CHECK(difproc::residual_nuisance(out) == worst);
  CHECK(difproc::residual_nuisance(CorrectionResult{}) == 0.0);
}

TEST_CASE("correction falls back to the optimizer off the closed-form path") {
  Rng rng(59, 0, 0, Rng::generate);
  StudyData s = make_study(rng, 300, 6, 2, 4, 1.0, 1.5, false);
  PipelineConfig cfg = identity_config({2, 3, 4});
  cfg.restarts = 2;
  const Vec theta0 = run_detection(s, cfg).theta0;

  SUBCASE("a second group column") {
    add_alternating_group(s);
    const CorrectionResult out = run_correction(s, cfg, theta0, {0, 1});
    REQUIRE(out.corrections.size() == 2);
    for (const auto& c : out.corrections) {
      CHECK(c.method == SurrogateMethod::numeric);
      CHECK(c.objective_after <= c.objective_before);
      CHECK(c.scores.omega.norm() == doctest::Approx(1.0).epsilon(1e-10));
    }
  }

  SUBCASE("a slope-dependent group term") {
    cfg.nonuniform = true;
    const CorrectionResult out = run_correction(s, cfg, theta0, {0, 1});
    for (const auto& c : out.corrections) {
      CHECK(c.method == SurrogateMethod::numeric);
      CHECK(c.objective_after <= c.objective_before);
    }
  }
}

TEST_CASE("binary correction reduces the group objective on the raw surrogate") {
  Rng rng(61, 0, 0, Rng::generate);
  StudyTruth truth;
  const StudyData s = make_study(rng, 1000, 12, 4, 6, 1.0, 1.5, true, &truth);
  PipelineConfig cfg = identity_config({4, 5, 6, 7, 8, 9, 10, 11});
  cfg.link = LinkKind::logit;
  cfg.restarts = 4;

  const Vec theta0 = run_detection(s, cfg).theta0;
  const CorrectionResult out = run_correction(s, cfg, theta0, {0, 1, 2, 3});
  REQUIRE(out.corrections.size() == 4);

  int strong = 0;
  double corr_sum = 0.0;
  for (const auto& c : out.corrections) {
    CHECK(c.method == SurrogateMethod::numeric);
    // Binary refits use the surrogate as returned, untouched.
    CHECK(same_bits(c.eta_used, c.scores.eta));
    CHECK(c.objective_after <= c.objective_before);
    if (c.objective_after <= 0.25 * c.objective_before) ++strong;
    corr_sum += std::abs(correlation(c.scores.eta, truth.eta[static_cast<size_t>(c.item)]));
    CHECK(out.bank.items[static_cast<size_t>(c.item)].params.sigma2 == 1.0);
  }
  CHECK(strong >= 2);
  CHECK(corr_sum / 4.0 > 0.7);
  CHECK(correlation(out.theta_corrected, truth.theta) > 0.7);
}

TEST_CASE("correction validates its inputs") {
  Rng rng(67, 0, 0, Rng::generate);
  const StudyData s = make_study(rng, 120, 5, 2, 3, 0.5, 1.0, false);
  const PipelineConfig cfg = identity_config({2, 3, 4});
  const Vec theta0 = run_detection(s, cfg).theta0;

  CHECK_THROWS_AS(run_correction(s, cfg, theta0.head(50), {0}), DataError);
  CHECK_THROWS_AS(run_correction(s, cfg, theta0, {5}), ConfigError);
  CHECK_THROWS_AS(run_correction(s, cfg, theta0, {-1}), ConfigError);
  // Item 3 is clean and has no feature block to build a surrogate from.
  CHECK_THROWS_AS(run_correction(s, cfg, theta0, {3}), DataError);

  // Duplicate and unsorted requests collapse to one ordered pass.
  const CorrectionResult out = run_correction(s, cfg, theta0, {1, 0, 1});
  REQUIRE(out.corrections.size() == 2);
  CHECK(out.corrections[0].item == 0);
  CHECK(out.corrections[1].item == 1);
  CHECK(out.bank.dif_items == std::vector<Eigen::Index>{0, 1});
}

TEST_CASE("repeated pipeline runs are identical") {
  Rng rng(71, 0, 0, Rng::generate);
  StudyData s = make_study(rng, 300, 6, 2, 4, 1.0, 1.5, false);
  add_alternating_group(s);  // forces the seeded numeric path
  PipelineConfig cfg = identity_config({2, 3, 4});
  cfg.restarts = 3;
  cfg.seed = 99;

  const DetectionResult d1 = run_detection(s, cfg);
  const DetectionResult d2 = run_detection(s, cfg);
  CHECK(same_bits(d1.theta0, d2.theta0));
  REQUIRE(d1.tests.size() == d2.tests.size());
  for (size_t t = 0; t < d1.tests.size(); ++t) {
    CHECK(d1.tests[t].p_value == d2.tests[t].p_value);
    CHECK(d1.tests[t].estimate == d2.tests[t].estimate);
  }

  const CorrectionResult c1 = run_correction(s, cfg, d1.theta0, {0, 1});
  const CorrectionResult c2 = run_correction(s, cfg, d2.theta0, {0, 1});
  REQUIRE(c1.corrections.size() == c2.corrections.size());
  for (size_t i = 0; i < c1.corrections.size(); ++i) {
    CHECK(same_bits(c1.corrections[i].scores.omega, c2.corrections[i].scores.omega));
    CHECK(c1.corrections[i].objective_after == c2.corrections[i].objective_after);
  }
  CHECK(same_bits(c1.theta_corrected, c2.theta_corrected));
}
