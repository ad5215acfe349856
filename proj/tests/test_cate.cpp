#include "mtcate/causal_forest.hpp"
#include "mtcate/cate.hpp"
#include "mtcate/simulate.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace mtcate;

namespace {

StudyData make_study(Index n, int p, std::uint64_t seed, const std::function<double(const Vector&, int)>& f,
                     double noise_sd = 0.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> z;
  StudyData d;
  d.X.resize(n, p);
  d.y.resize(n);
  for (Index i = 0; i < n; ++i) {
    for (int j = 0; j < p; ++j) d.X(i, j) = z(rng);
    d.treat.push_back(static_cast<int>(i % 2));
    d.y[i] = f(d.X.row(i).transpose(), d.treat.back()) + noise_sd * z(rng);
  }
  return d;
}

ForestParams exhaustive(int n_trees = 1) {
  ForestParams p;
  p.n_trees = n_trees;
  p.bootstrap_fraction = 1.0;
  p.mtry = 1000;  // clamped below
  p.tree_params = {kUnlimitedDepth, 1, 0.0};
  return p;
}

ForestParams clamp_mtry(ForestParams p, int features) {
  p.mtry = std::min(p.mtry, features);
  return p;
}

// Independent difference in arm means over the given rows.
double diff_in_means(const StudyData& d) {
  double s1 = 0, s0 = 0;
  int n1 = 0, n0 = 0;
  for (Index i = 0; i < d.rows(); ++i) {
    if (d.treat[static_cast<std::size_t>(i)]) {
      s1 += d.y[i];
      ++n1;
    } else {
      s0 += d.y[i];
      ++n0;
    }
  }
  return s1 / n1 - s0 / n0;
}

}  // namespace

// ---------------------------------------------------------------------------
// S-learner

TEST(SLearner, SingleLeafGivesZeroEffect) {
  const auto d = make_study(200, 3, 1, [](const Vector& x, int a) { return x[0] + 2.0 * a; }, 0.1);
  ForestParams p;
  p.n_trees = 10;
  p.tree_params.max_depth = 0;
  const auto m = fit_s_learner(d, p);
  const Vector tau = m->predict(d.X);
  EXPECT_EQ(tau, Vector::Zero(d.rows()));
}

TEST(SLearner, NoiselessTreatmentOnlyOutcome) {
  const auto d = make_study(60, 2, 2, [](const Vector&, int a) { return static_cast<double>(a); });
  const auto m = fit_s_learner(d, clamp_mtry(exhaustive(), 3));
  // The only gainful split is on A; both children are pure.
  ASSERT_EQ(m->joint_outcome_forest.trees[0].nodes.size(), 3u);
  EXPECT_EQ(m->joint_outcome_forest.trees[0].nodes[0].feature, 2);
  const Vector tau = m->predict(make_study(25, 2, 3, [](const Vector&, int) { return 0.0; }).X);
  EXPECT_EQ(tau.size(), 25);
  for (Index i = 0; i < tau.size(); ++i) EXPECT_DOUBLE_EQ(tau[i], 1.0);
}

TEST(SLearner, OutcomeShiftInvarianceWithExhaustiveTree) {
  auto d = make_study(80, 2, 4, [](const Vector& x, int a) { return x[0] + a * (x[1] > 0 ? 1.0 : -1.0); }, 0.2);
  const auto p = clamp_mtry(exhaustive(), 3);
  const Vector a = fit_s_learner(d, p)->predict(d.X);
  d.y.array() += 5.0;
  const Vector b = fit_s_learner(d, p)->predict(d.X);
  EXPECT_LT((a - b).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(SLearner, SingleArmIsAnError) {
  auto d = make_study(20, 2, 5, [](const Vector&, int) { return 0.0; });
  std::fill(d.treat.begin(), d.treat.end(), 1);
  EXPECT_THROW(fit_s_learner(d), DataError);
}

// ---------------------------------------------------------------------------
// X-learner

TEST(XLearner, WeightExtremesReduceToArmForests) {
  const auto d = make_study(300, 3, 6, [](const Vector& x, int a) { return x[1] + a * x[0]; }, 0.3);
  ForestParams p;
  p.n_trees = 20;
  const auto q = make_study(50, 3, 7, [](const Vector&, int) { return 0.0; }).X;
  for (double g : {0.0, 1.0}) {
    XLearnerOptions o;
    o.weight_source = WeightSource::fixed_constant;
    o.fixed_weight = g;
    const auto m = fit_x_learner(d, p, o);
    const Vector pred = m->predict(q);
    const Vector arm = g == 1.0 ? m->tau1_forest.predict(q) : m->tau0_forest.predict(q);
    for (Index i = 0; i < q.rows(); ++i) EXPECT_EQ(pred[i], arm[i]);
  }
}

TEST(XLearner, ConvexCombinationPointwise) {
  const auto d = make_study(200, 2, 8, [](const Vector& x, int a) { return a * x[0]; }, 0.1);
  ForestParams p;
  p.n_trees = 10;
  XLearnerOptions o;
  o.weight_source = WeightSource::fixed_constant;
  o.fixed_weight = 0.3;
  const auto m = fit_x_learner(d, p, o);
  const Vector expect = 0.3 * m->tau1_forest.predict(d.X) + 0.7 * m->tau0_forest.predict(d.X);
  EXPECT_LT((m->predict(d.X) - expect).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(XLearner, NoiselessGridRecoversModerator) {
  // 16-point grid: x1 in 1..8, each value once per arm; Y = A * x1.
  StudyData d;
  d.X.resize(16, 1);
  d.y.resize(16);
  for (int i = 0; i < 16; ++i) {
    d.X(i, 0) = 1 + i / 2;
    d.treat.push_back(i % 2);
    d.y[i] = d.treat.back() * d.X(i, 0);
  }
  auto p = exhaustive();
  p.mtry = 1;
  p.tree_params.min_node_size = 1;
  const auto m = fit_x_learner(d, p);
  // mu0 == 0 and mu1(x) == x1 at every grid value, so both imputed effects are x1.
  const Vector tau = m->predict(d.X);
  for (int i = 0; i < 16; ++i) EXPECT_NEAR(tau[i], d.X(i, 0), 1e-12);
}

TEST(XLearner, PerTrialWeightsAndSmallArmError) {
  auto d = make_study(40, 2, 9, [](const Vector& x, int a) { return a * x[0]; });
  d.trial.assign(40, 1);
  for (int i = 20; i < 40; ++i) d.trial[static_cast<std::size_t>(i)] = 2;
  d.treat[20] = 1;  // trial 2: 11 of 20 treated
  ForestParams p;
  p.n_trees = 5;
  const auto m = fit_x_learner(d, p);
  EXPECT_DOUBLE_EQ(m->trial_weight.at(1), 0.5);
  EXPECT_DOUBLE_EQ(m->trial_weight.at(2), 0.55);

  auto small = make_study(8, 1, 10, [](const Vector&, int) { return 0.0; });
  EXPECT_THROW(fit_x_learner(small, ForestParams{}), DataError);  // 4 per arm < 5
}

TEST(XLearner, LogisticWeightInUnitInterval) {
  const auto d = make_study(300, 2, 11, [](const Vector& x, int a) { return a * x[0]; }, 0.1);
  ForestParams p;
  p.n_trees = 5;
  XLearnerOptions o;
  o.weight_source = WeightSource::logistic;
  const auto m = fit_x_learner(d, p, o);
  for (Index i = 0; i < d.rows(); ++i) {
    const std::vector<double> row{d.X(i, 0), d.X(i, 1)};
    const double g = m->weight(row, std::nullopt);
    EXPECT_GE(g, 0.0);
    EXPECT_LE(g, 1.0);
  }
}

// ---------------------------------------------------------------------------
// Causal forest

TEST(CausalForest, DepthZeroIsDifferenceInMeans) {
  const auto d = make_study(301, 3, 12, [](const Vector& x, int a) { return x[0] + a * (1 + x[1]); }, 0.5);
  CausalForestParams cp;
  cp.forest.n_trees = 7;
  cp.forest.bootstrap_fraction = 1.0;
  cp.forest.tree_params.max_depth = 0;
  const auto m = fit_causal_forest(d, cp);
  const Vector tau = m->predict(d.X);
  for (Index i = 0; i < tau.size(); ++i) EXPECT_NEAR(tau[i], diff_in_means(d), 1e-12);
}

TEST(CausalForest, ConstantEffectLeavesAreExact) {
  const auto d = make_study(400, 3, 13, [](const Vector&, int a) { return 2.0 * a; });
  CausalForestParams cp;
  cp.forest.n_trees = 20;
  const auto m = fit_causal_forest(d, cp);
  for (const auto& t : m->trees)
    for (const auto& nd : t.nodes)
      if (nd.is_leaf()) {
        EXPECT_DOUBLE_EQ(nd.value, 2.0);
      }
  const Vector tau = m->predict(d.X);
  for (Index i = 0; i < tau.size(); ++i) EXPECT_DOUBLE_EQ(tau[i], 2.0);
}

TEST(CausalForest, LeavesHaveBothArmsAndSplitsRespectMinPerArm) {
  const auto d = make_study(500, 2, 14, [](const Vector& x, int a) { return a * (x[0] > 0 ? 2.0 : 0.0); }, 0.1);
  CausalForestParams cp;
  cp.forest.n_trees = 10;
  cp.forest.tree_params.min_node_size = 7;
  const auto m = fit_causal_forest(d, cp);
  for (const auto& t : m->trees)
    for (const auto& nd : t.nodes)
      if (nd.is_leaf()) {
        EXPECT_GE(nd.n_treated, 7);
        EXPECT_GE(nd.n_control, 7);
      }
}

TEST(CausalForest, RootSplitMatchesExhaustiveContrastSearch) {
  const auto d = make_study(120, 3, 15, [](const Vector& x, int a) { return x[2] + a * (x[1] > 0.3 ? 1.5 : 0.0); }, 0.2);
  CausalForestParams cp;
  cp.forest.n_trees = 1;
  cp.forest.bootstrap_fraction = 1.0;
  cp.forest.mtry = 3;
  cp.forest.tree_params = {1, 5, 0.0};
  const auto m = fit_causal_forest(d, cp);

  int best_f = -1;
  double best_thr = 0, best_gain = 0;
  for (int f = 0; f < 3; ++f) {
    std::vector<double> v(d.X.col(f).data(), d.X.col(f).data() + d.rows());
    std::sort(v.begin(), v.end());
    for (std::size_t k = 0; k + 1 < v.size(); ++k) {
      const double thr = (v[k] + v[k + 1]) / 2;
      double s[2][2] = {{0, 0}, {0, 0}};
      int c[2][2] = {{0, 0}, {0, 0}};
      for (Index i = 0; i < d.rows(); ++i) {
        const int side = d.X(i, f) <= thr ? 0 : 1;
        s[side][d.treat[static_cast<std::size_t>(i)]] += d.y[i];
        ++c[side][d.treat[static_cast<std::size_t>(i)]];
      }
      if (c[0][0] < 5 || c[0][1] < 5 || c[1][0] < 5 || c[1][1] < 5) continue;
      const double tl = s[0][1] / c[0][1] - s[0][0] / c[0][0];
      const double tr = s[1][1] / c[1][1] - s[1][0] / c[1][0];
      const double nl = c[0][0] + c[0][1], nr = c[1][0] + c[1][1];
      const double g = nl * nr / ((nl + nr) * (nl + nr)) * (tl - tr) * (tl - tr);
      if (g > best_gain + 1e-12) best_f = f, best_thr = thr, best_gain = g;
    }
  }
  ASSERT_FALSE(m->trees[0].nodes[0].is_leaf());
  EXPECT_EQ(m->trees[0].nodes[0].feature, best_f);
  EXPECT_DOUBLE_EQ(m->trees[0].nodes[0].threshold, best_thr);
}

TEST(CausalForest, SharpModerator) {
  const auto d = make_study(4000, 5, 16, [](const Vector& x, int a) { return a * (x[0] >= 0 ? 2.0 : 0.0); }, 0.1);
  CausalForestParams cp;
  cp.forest.n_trees = 200;
  const auto m = fit_causal_forest(d, cp);
  const auto q = make_study(2000, 5, 17, [](const Vector&, int) { return 0.0; }).X;
  const Vector tau = m->predict(q);
  double err = 0;
  int n = 0;
  for (Index i = 0; i < q.rows(); ++i)
    if (std::abs(q(i, 0)) > 0.25) {
      err += std::abs(tau[i] - (q(i, 0) >= 0 ? 2.0 : 0.0));
      ++n;
    }
  EXPECT_LE(err / n, 0.25);
}

TEST(CausalForest, HonestForestEstimatesFromHeldOutHalf) {
  const auto d = make_study(4000, 5, 18, [](const Vector& x, int a) { return a * (x[0] >= 0 ? 2.0 : 0.0); }, 0.1);
  CausalForestParams cp;
  cp.forest.n_trees = 100;
  cp.honesty = true;
  const auto m = fit_causal_forest(d, cp);
  const Vector tau = m->predict(d.X);
  EXPECT_TRUE(tau.allFinite());
  double err = 0;
  int n = 0;
  for (Index i = 0; i < d.rows(); ++i)
    if (std::abs(d.X(i, 0)) > 0.25) {
      err += std::abs(tau[i] - (d.X(i, 0) >= 0 ? 2.0 : 0.0));
      ++n;
    }
  EXPECT_LE(err / n, 0.35);
}

TEST(CausalForest, HonestEmptyArmFallsBackToParent) {
  // Hand-built tree: root split at x <= 0; estimation rows put only treated
  // units on the right, so the right leaf inherits the root effect.
  TreeModel t;
  t.feature_count = 1;
  t.nodes.resize(3);
  t.nodes[0].feature = 0;
  t.nodes[0].threshold = 0.0;
  t.nodes[0].left = 1;
  t.nodes[0].right = 2;
  t.nodes[1].depth = t.nodes[2].depth = 1;
  Matrix X(5, 1);
  X << -1, -2, -3, 1, 2;
  Vector y(5);
  y << 4, 1, 2, 9, 9;
  const std::vector<int> treat{1, 0, 0, 1, 1};
  const std::vector<int> rows{0, 1, 2, 3, 4};
  detail::honest_reestimate(t, X, y, treat, rows);
  const double root = (4 + 9 + 9) / 3.0 - (1 + 2) / 2.0;
  EXPECT_DOUBLE_EQ(t.nodes[0].value, root);
  EXPECT_DOUBLE_EQ(t.nodes[1].value, 4.0 - 1.5);
  EXPECT_DOUBLE_EQ(t.nodes[2].value, root);
}

TEST(CausalForest, HonestHalfWithoutArmIsAnError) {
  auto d = make_study(20, 1, 19, [](const Vector&, int) { return 0.0; });
  std::fill(d.treat.begin(), d.treat.end(), 0);
  d.treat[0] = 1;
  CausalForestParams cp;
  cp.honesty = true;
  cp.forest.n_trees = 2;
  EXPECT_THROW(fit_causal_forest(d, cp), DataError);
}

TEST(CausalForest, ThreadsDoNotChangeResult) {
  const auto d = make_study(300, 3, 20, [](const Vector& x, int a) { return a * x[0]; }, 0.1);
  CausalForestParams cp;
  cp.forest.n_trees = 16;
  const Vector a = fit_causal_forest(d, cp)->predict(d.X);
  cp.forest.threads = 4;
  EXPECT_EQ(a, fit_causal_forest(d, cp)->predict(d.X));
}

// ---------------------------------------------------------------------------
// Variance and intervals

TEST(CateVariance, IdenticalTreesGiveZeroVariance) {
  const auto d = make_study(200, 2, 21, [](const Vector&, int a) { return 2.0 * a; });
  CausalForestParams cp;
  cp.forest.n_trees = 8;
  cp.forest.bootstrap_fraction = 1.0;
  cp.forest.mtry = 2;
  cp.ci_groups = 2;
  const auto m = fit_causal_forest(d, cp);
  const auto iv = estimate_cate_variance(*m, d.X);
  for (Index i = 0; i < d.rows(); ++i) {
    EXPECT_EQ(iv.variance[i], 0.0);
    EXPECT_EQ(iv.upper[i] - iv.lower[i], 0.0);
    EXPECT_DOUBLE_EQ(iv.estimate[i], 2.0);
  }
}

TEST(CateVariance, MatchesGroupedOracleAndIsNonNegative) {
  const auto d = make_study(400, 3, 22, [](const Vector& x, int a) { return x[1] + a * x[0]; }, 0.5);
  CausalForestParams cp;
  cp.forest.n_trees = 40;
  cp.ci_groups = 10;
  const auto m = fit_causal_forest(d, cp);
  const auto iv = estimate_cate_variance(*m, d.X);
  for (Index i = 0; i < 20; ++i) {
    std::vector<double> pred;
    for (const auto& t : m->trees) pred.push_back(t.predict_row(d.X, i));
    const double mean = std::accumulate(pred.begin(), pred.end(), 0.0) / 40.0;
    double between = 0, within = 0;
    for (int g = 0; g < 10; ++g) {
      double gm = 0;
      for (int k = 0; k < 4; ++k) gm += pred[static_cast<std::size_t>(g * 4 + k)] / 4.0;
      between += (gm - mean) * (gm - mean) / 10.0;
      for (int k = 0; k < 4; ++k) within += std::pow(pred[static_cast<std::size_t>(g * 4 + k)] - gm, 2) / 40.0;
    }
    const double expect = std::max(0.0, between - within / 3.0);
    EXPECT_NEAR(iv.variance[i], expect, 1e-12);
    EXPECT_GE(iv.variance[i], 0.0);
    EXPECT_NEAR(iv.upper[i] - iv.estimate[i], 1.96 * std::sqrt(expect), 1e-12);
  }
}

TEST(CateVariance, GroupContract) {
  const auto d = make_study(100, 2, 23, [](const Vector&, int a) { return 1.0 * a; });
  CausalForestParams cp;
  cp.forest.n_trees = 10;
  cp.ci_groups = 3;
  EXPECT_THROW(fit_causal_forest(d, cp), DataError);
  cp.ci_groups = 0;
  const auto m = fit_causal_forest(d, cp);
  EXPECT_THROW(estimate_cate_variance(*m, d.X), DataError);
}

TEST(CateVariance, CoverageOnScenario1a) {
  ScenarioConfig cfg;
  cfg.K = 1;
  cfg.n_per_trial = 3000;
  cfg.sigma_beta = 0.0;
  cfg.seed = 24;
  const auto sim = generate_trials(cfg, 0);
  CausalForestParams cp;
  cp.forest.n_trees = 1000;
  cp.ci_groups = 50;
  const auto m = fit_causal_forest(StudyData::from(sim.data), cp);

  cfg.n_per_trial = 200;
  const auto test = generate_trials(cfg, 1);
  const auto iv = estimate_cate_variance(*m, test.data.covariates);
  int covered = 0;
  for (Index i = 0; i < 200; ++i) covered += test.tau[i] >= iv.lower[i] && test.tau[i] <= iv.upper[i];
  const double coverage = covered / 200.0;
  EXPECT_GE(coverage, 0.80);
  EXPECT_LE(coverage, 0.99);
}

TEST(CateModels, FinitePredictionsOfMatchingLength) {
  const auto d = make_study(200, 4, 25, [](const Vector& x, int a) { return x[0] + a * x[1]; }, 0.5);
  ForestParams p;
  p.n_trees = 10;
  CausalForestParams cp;
  cp.forest = p;
  const auto q = make_study(33, 4, 26, [](const Vector&, int) { return 0.0; }).X;
  for (const CateModelPtr& m : {CateModelPtr(fit_s_learner(d, p)), CateModelPtr(fit_x_learner(d, p)),
                               CateModelPtr(fit_causal_forest(d, cp))}) {
    const Vector v = m->predict(q);
    EXPECT_EQ(v.size(), 33);
    EXPECT_TRUE(v.allFinite());
    EXPECT_THROW(m->predict(Matrix(2, 3)), DataError);
  }
}
