#include "mtcate/aggregate.hpp"
#include "mtcate/simulate.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

using namespace mtcate;
using mtcate::testing::make_dataset;

namespace {

class ConstantModel final : public CateModel {
 public:
  ConstantModel(double v, int p) : value(v), p(p) {}
  double value;
  int p;
  CateKind kind() const override { return CateKind::ensemble; }
  int feature_count() const override { return p; }
  double predict_one(std::span<const double>, std::optional<int>) const override { return value; }
  Json to_json() const override { return {{"kind", "constant"}}; }
};

// Local "model" that returns 2 * x1 regardless of trial.
class LinearModel final : public CateModel {
 public:
  explicit LinearModel(int p) : p(p) {}
  int p;
  CateKind kind() const override { return CateKind::ensemble; }
  int feature_count() const override { return p; }
  double predict_one(std::span<const double> x, std::optional<int>) const override { return 2.0 * x[0]; }
  Json to_json() const override { return {{"kind", "linear"}}; }
};

LearnerSpec spec_for(Learner l, int n_trees = 20) {
  LearnerSpec s;
  s.learner = l;
  s.forest.n_trees = n_trees;
  s.forest.seed = 99;
  return s;
}

MultiTrialDataset effect_data(std::vector<int> sizes, std::uint64_t seed) {
  return make_dataset(sizes, 3, seed, [](auto x, int a, int s) { return x(1) + a * (x(0) + 0.5 * s); });
}

}  // namespace

// ---------------------------------------------------------------------------
// Complete and indicator pooling

TEST(CompletePooling, SingleTrialEqualsSingleStudyLearner) {
  const auto d = effect_data({200}, 1);
  for (Learner l : {Learner::s, Learner::x, Learner::cf}) {
    const auto spec = spec_for(l);
    const Vector pooled = fit_complete_pooling(d, spec)->predict(d.covariates);
    const Vector single = fit_learner(StudyData::from(d, false), spec)->predict(d.covariates);
    EXPECT_EQ(pooled, single) << to_string(l);
  }
}

TEST(CompletePooling, IgnoresTrialId) {
  const auto d = effect_data({100, 100, 100}, 2);
  const auto m = fit_complete_pooling(d, spec_for(Learner::cf));
  const std::vector<int> ones(static_cast<std::size_t>(d.rows()), 1), sevens(static_cast<std::size_t>(d.rows()), 7);
  const Vector a = m->predict(d.covariates, ones);
  EXPECT_EQ(a, m->predict(d.covariates, sevens));
  EXPECT_EQ(a, m->predict(d.covariates));
  const std::vector<double> row{0.1, -0.2, 0.3};
  EXPECT_EQ(m->predict_one(row, 1), m->predict_one(row, 12345));
}

TEST(IndicatorPooling, SingleTrialMatchesCompletePooling) {
  const auto d = effect_data({150}, 3);
  for (Learner l : {Learner::s, Learner::x, Learner::cf}) {
    const auto spec = spec_for(l);
    const Vector a = fit_indicator_pooling(d, spec)->predict(d.covariates, d.trial);
    const Vector b = fit_complete_pooling(d, spec)->predict(d.covariates);
    EXPECT_EQ(a, b) << to_string(l);
  }
}

TEST(IndicatorPooling, NeedsKnownTrialId) {
  const auto d = effect_data({60, 60}, 4);
  const auto m = fit_indicator_pooling(d, spec_for(Learner::s, 5));
  EXPECT_THROW(m->predict(d.covariates), DataError);
  std::vector<int> bad = d.trial;
  bad[3] = 9;
  EXPECT_THROW(m->predict(d.covariates, bad), DataError);
  EXPECT_TRUE(m->predict(d.covariates, d.trial).allFinite());
}

TEST(IndicatorPooling, AppendsOneHotColumns) {
  const auto d = effect_data({30, 30, 30}, 5);
  const auto m = fit_indicator_pooling(d, spec_for(Learner::cf, 5));
  const auto* cf = dynamic_cast<const CausalForestModel*>(m->inner.get());
  ASSERT_NE(cf, nullptr);
  EXPECT_EQ(cf->features, 6);
  const Matrix X = detail::append_onehot(d.covariates, d.trial, d.trial_ids, "trial");
  for (Index i = 0; i < X.rows(); ++i) EXPECT_DOUBLE_EQ(X.rightCols(3).row(i).sum(), 1.0);
}

TEST(IndicatorPooling, HomogeneousTrialsAgreeAcrossIds) {
  ScenarioConfig cfg;
  cfg.K = 2;
  cfg.sigma_beta = 0.0;
  cfg.sigma_delta = 0.0;
  cfg.seed = 6;
  const auto sim = generate_trials(cfg, 0);
  LearnerSpec spec = spec_for(Learner::cf, 200);
  const auto m = fit_indicator_pooling(sim.data, spec);
  const std::vector<int> t1(static_cast<std::size_t>(sim.data.rows()), 1), t2(static_cast<std::size_t>(sim.data.rows()), 2);
  const Vector gap = m->predict(sim.data.covariates, t1) - m->predict(sim.data.covariates, t2);
  EXPECT_LE(gap.cwiseAbs().mean(), 0.1);
}

// ---------------------------------------------------------------------------
// Augmented dataset and ensembles

TEST(AugmentedDataset, ShapeAndLevels) {
  const auto d = effect_data({4, 3, 3}, 7);
  std::vector<CateModelPtr> locals(3, std::make_shared<ConstantModel>(2.0, 3));
  const auto aug = build_augmented_dataset(locals, d);
  EXPECT_EQ(aug.rows(), 30);
  for (Index r = 0; r < aug.rows(); ++r) EXPECT_EQ(aug.cate[r], 2.0);
  std::map<int, int> counts;
  for (Index r = 0; r < aug.rows(); ++r) ++counts[aug.model_id(r)];
  ASSERT_EQ(counts.size(), 3u);
  for (auto [id, c] : counts) EXPECT_EQ(c, 10);

  const Matrix D = aug.design();
  EXPECT_EQ(D.rows(), 30);
  EXPECT_EQ(D.cols(), 6);
  for (Index r = 0; r < 30; ++r) {
    EXPECT_EQ(D.row(r).head(3), d.covariates.row(r % 10));
    EXPECT_EQ(D(r, 3 + aug.model_id(r) - 1), 1.0);
    EXPECT_EQ(D.row(r).tail(3).sum(), 1.0);
  }
}

TEST(AugmentedDataset, ModelCountMustMatchTrials) {
  const auto d = effect_data({5, 5}, 8);
  std::vector<CateModelPtr> locals(3, std::make_shared<ConstantModel>(1.0, 3));
  EXPECT_THROW(build_augmented_dataset(locals, d), DataError);
}

TEST(Ensemble, ConstantTargetIsReproduced) {
  const auto d = effect_data({20, 20}, 9);
  std::vector<CateModelPtr> locals(2, std::make_shared<ConstantModel>(-1.25, 3));
  const auto aug = build_augmented_dataset(locals, d);
  EnsembleParams ep;
  ep.forest.n_trees = 10;
  ep.lasso.folds = 5;
  for (auto kind : {EnsembleKind::tree, EnsembleKind::forest, EnsembleKind::lasso}) {
    const auto m = fit_ensemble(aug, kind, ep);
    for (int s : {1, 2}) {
      const std::vector<int> ids(static_cast<std::size_t>(d.rows()), s);
      const Vector v = m->predict(d.covariates, ids);
      for (Index i = 0; i < v.size(); ++i) EXPECT_NEAR(v[i], -1.25, 1e-12) << to_string(kind);
    }
  }
}

TEST(Ensemble, LassoRecoversLinearTarget) {
  const auto d = effect_data({150, 150, 150}, 10);
  std::vector<CateModelPtr> locals(3, std::make_shared<LinearModel>(3));
  const auto aug = build_augmented_dataset(locals, d);
  const auto m = fit_ensemble(aug, EnsembleKind::lasso);
  EXPECT_NEAR(m->lasso.coefficients[0], 2.0, 0.05);
  for (Index j = 1; j < m->lasso.coefficients.size(); ++j) EXPECT_NEAR(m->lasso.coefficients[j], 0.0, 0.05);
}

TEST(Ensemble, SingleTrialPerfectTreeReproducesLocalModel) {
  // 4 x 4 grid, K = 1, exhaustive tree ensemble.
  MultiTrialDataset d;
  d.covariates.resize(16, 2);
  d.outcome.resize(16);
  for (int i = 0; i < 16; ++i) {
    d.covariates(i, 0) = i % 4;
    d.covariates(i, 1) = i / 4;
    d.treatment.push_back(i % 2);
    d.trial.push_back(1);
    d.outcome[i] = d.treatment.back() * (d.covariates(i, 0) + 2 * d.covariates(i, 1)) + 0.1 * i;
  }
  d.covariate_names = {"x1", "x2"};
  d.trial_ids = {1};
  LearnerSpec spec = spec_for(Learner::s, 10);
  spec.forest.tree_params.min_node_size = 1;
  const auto locals = fit_local_models(d, spec);
  const auto aug = build_augmented_dataset(locals, d);
  EnsembleParams ep;
  ep.tree = {kUnlimitedDepth, 1, 0.0};
  ep.tree_complexity = 0.0;
  const auto m = fit_ensemble(aug, EnsembleKind::tree, ep);
  const Vector local = locals[0]->predict(d.covariates, d.trial);
  const Vector ens = m->predict(d.covariates, d.trial);
  for (Index i = 0; i < 16; ++i) EXPECT_NEAR(ens[i], local[i], 1e-12);
}

TEST(Ensemble, PredictsAtOwnTrialAndRejectsUnknown) {
  const auto d = effect_data({40, 40}, 11);
  auto locals = std::vector<CateModelPtr>{std::make_shared<ConstantModel>(1.0, 3), std::make_shared<ConstantModel>(3.0, 3)};
  const auto aug = build_augmented_dataset(locals, d);
  EnsembleParams ep;
  ep.tree = {kUnlimitedDepth, 1, 0.0};
  ep.tree_complexity = 0.0;
  const auto m = fit_ensemble(aug, EnsembleKind::tree, ep);
  const Vector v = m->predict(d.covariates, d.trial);
  for (Index i = 0; i < v.size(); ++i) EXPECT_DOUBLE_EQ(v[i], d.trial[static_cast<std::size_t>(i)] == 1 ? 1.0 : 3.0);
  std::vector<int> bad = d.trial;
  bad[0] = 5;
  EXPECT_THROW(m->predict(d.covariates, bad), DataError);
  EXPECT_THROW(m->predict(d.covariates), DataError);
}

TEST(Ensemble, LocalModelsUseTheirOwnTrialRows) {
  const auto d = effect_data({50, 70}, 12);
  const auto locals = fit_local_models(d, spec_for(Learner::cf, 5));
  ASSERT_EQ(locals.size(), 2u);
  const auto* a = dynamic_cast<const CausalForestModel*>(locals[0].get());
  const auto* b = dynamic_cast<const CausalForestModel*>(locals[1].get());
  for (const auto& rows : a->inbag)
    for (int r : rows) EXPECT_LT(r, 50);
  for (const auto& rows : b->inbag)
    for (int r : rows) EXPECT_LT(r, 70);
}

TEST(Aggregation, AllMethodsFinite) {
  const auto d = effect_data({80, 80, 80}, 13);
  for (Learner l : {Learner::s, Learner::x, Learner::cf}) {
    const auto spec = spec_for(l, 10);
    std::vector<CateModelPtr> models{fit_complete_pooling(d, spec), fit_indicator_pooling(d, spec)};
    const auto aug = build_augmented_dataset(fit_local_models(d, spec), d);
    EnsembleParams ep;
    ep.forest.n_trees = 10;
    ep.lasso.folds = 5;
    for (auto k : {EnsembleKind::tree, EnsembleKind::forest, EnsembleKind::lasso}) models.push_back(fit_ensemble(aug, k, ep));
    for (const auto& m : models) EXPECT_TRUE(m->predict(d.covariates, d.trial).allFinite());
  }
}
