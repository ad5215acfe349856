#pragma once

#include "mtcate/causal_forest.hpp"
#include "mtcate/cate.hpp"
#include "mtcate/lasso.hpp"

#include <algorithm>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace mtcate {

enum class Learner { s, x, cf };

inline std::string to_string(Learner l) {
  switch (l) {
    case Learner::s: return "S";
    case Learner::x: return "X";
    case Learner::cf: return "CF";
  }
  return "?";
}

inline Learner learner_from_string(const std::string& s) {
  if (s == "S" || s == "s" || s == "s_learner") return Learner::s;
  if (s == "X" || s == "x" || s == "x_learner") return Learner::x;
  if (s == "CF" || s == "cf" || s == "causal_forest") return Learner::cf;
  throw DataError("unknown learner '" + s + "' (expected S, X or CF)");
}

// A single-study learner with everything needed to fit it.
struct LearnerSpec {
  Learner learner = Learner::cf;
  ForestParams forest{};
  XLearnerOptions x{};
  bool honesty = false;  // causal forest only
  int ci_groups = 0;     // causal forest only
};

inline CateModelPtr fit_learner(const StudyData& data, const LearnerSpec& spec) {
  switch (spec.learner) {
    case Learner::s: return fit_s_learner(data, spec.forest);
    case Learner::x: return fit_x_learner(data, spec.forest, spec.x);
    case Learner::cf: return fit_causal_forest(data, {spec.forest, spec.honesty, spec.ci_groups});
  }
  throw DataError("unknown learner");
}

using ModelParser = std::function<CateModelPtr(const Json&)>;

namespace detail {

inline int level_index(const std::vector<int>& levels, int id, const char* what) {
  const auto it = std::find(levels.begin(), levels.end(), id);
  if (it == levels.end()) throw DataError(std::string("unknown ") + what + " " + std::to_string(id));
  return static_cast<int>(it - levels.begin());
}

// One-hot columns for `levels`. A single level carries no information and
// gets no column, so K = 1 designs equal the plain covariates.
inline int onehot_width(const std::vector<int>& levels) { return levels.size() >= 2 ? static_cast<int>(levels.size()) : 0; }

inline Matrix append_onehot(const Matrix& X, std::span<const int> ids, const std::vector<int>& levels, const char* what) {
  const int w = onehot_width(levels);
  Matrix out = Matrix::Zero(X.rows(), X.cols() + w);
  out.leftCols(X.cols()) = X;
  for (Index i = 0; i < X.rows(); ++i) {
    const int k = level_index(levels, ids[static_cast<std::size_t>(i)], what);
    if (w > 0) out(i, X.cols() + k) = 1.0;
  }
  return out;
}

inline std::vector<double> onehot_row(std::span<const double> x, int id, const std::vector<int>& levels,
                                      const char* what) {
  const int k = level_index(levels, id, what);
  std::vector<double> row(x.begin(), x.end());
  row.resize(x.size() + static_cast<std::size_t>(onehot_width(levels)), 0.0);
  if (onehot_width(levels) > 0) row[x.size() + static_cast<std::size_t>(k)] = 1.0;
  return row;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Complete pooling and pooling with a trial indicator
// ---------------------------------------------------------------------------

class PooledModel final : public CateModel {
 public:
  CateModelPtr inner;
  bool indicator = false;
  std::vector<int> trial_ids;  // one-hot levels (indicator pooling)
  int covariates = 0;

  CateKind kind() const override { return CateKind::pooled; }
  int feature_count() const override { return covariates; }

  double predict_one(std::span<const double> x, std::optional<int> trial) const override {
    if (!indicator) return inner->predict_one(x, std::nullopt);
    if (!trial) throw DataError("indicator pooling needs a trial id to predict");
    return inner->predict_one(detail::onehot_row(x, *trial, trial_ids, "trial id"), trial);
  }

  Vector predict(const Matrix& X, std::span<const int> trials = {}) const override {
    check_input(X, trials);
    if (!indicator) return inner->predict(X, {});
    if (trials.empty() && X.rows() > 0) throw DataError("indicator pooling needs a trial id to predict");
    return inner->predict(detail::append_onehot(X, trials, trial_ids, "trial id"), trials);
  }

  Json to_json() const override {
    return {{"kind", "pooled"},
            {"indicator", indicator},
            {"trial_ids", trial_ids},
            {"feature_count", covariates},
            {"inner", inner->to_json()}};
  }

  static std::shared_ptr<PooledModel> from_json(const Json& j, const ModelParser& parse) {
    auto m = std::make_shared<PooledModel>();
    m->indicator = j.at("indicator").get<bool>();
    m->trial_ids = j.at("trial_ids").get<std::vector<int>>();
    m->covariates = j.at("feature_count").get<int>();
    m->inner = parse(j.at("inner"));
    return m;
  }
};

// Concatenates all trials, drops trial membership and fits one learner.
inline std::shared_ptr<PooledModel> fit_complete_pooling(const MultiTrialDataset& data, const LearnerSpec& spec) {
  data.validate();
  auto m = std::make_shared<PooledModel>();
  m->covariates = static_cast<int>(data.p());
  m->trial_ids = data.trial_ids;
  m->inner = fit_learner(StudyData::from(data, false), spec);
  return m;
}

// Concatenates all trials and appends a one-hot trial indicator to X.
inline std::shared_ptr<PooledModel> fit_indicator_pooling(const MultiTrialDataset& data, const LearnerSpec& spec) {
  data.validate();
  auto m = std::make_shared<PooledModel>();
  m->indicator = true;
  m->covariates = static_cast<int>(data.p());
  m->trial_ids = data.trial_ids;
  auto study = StudyData::from(data, true);
  study.X = detail::append_onehot(data.covariates, data.trial, data.trial_ids, "trial id");
  m->inner = fit_learner(study, spec);
  return m;
}

// ---------------------------------------------------------------------------
// Ensemble approach
// ---------------------------------------------------------------------------

// One learner per trial, fitted on that trial's rows only. Local model k
// belongs to data.trial_ids[k].
inline std::vector<CateModelPtr> fit_local_models(const MultiTrialDataset& data, const LearnerSpec& spec) {
  data.validate();
  std::vector<CateModelPtr> out;
  for (int id : data.trial_ids) {
    LearnerSpec local = spec;
    local.forest.seed = derive_seed(spec.forest.seed, {static_cast<std::uint64_t>(id), hash_tag("local-model")});
    auto rows = data.subset(data.rows_of(id));
    try {
      out.push_back(fit_learner(StudyData::from(rows, true), local));
    } catch (const DataError& e) {
      throw DataError("local model for trial " + std::to_string(id) + ": " + e.what());
    }
  }
  return out;
}

// Every individual crossed with every local model. Row k * N + i holds local
// model k's estimate for individual i.
struct AugmentedDataset {
  Matrix X;                       // N x p, shared by all K blocks
  std::vector<int> source_trial;  // model k (1-based id k + 1) was fitted on this trial
  Vector cate;                    // N * K estimates

  Index individuals() const { return X.rows(); }
  int K() const { return static_cast<int>(source_trial.size()); }
  Index rows() const { return cate.size(); }
  int model_id(Index r) const { return static_cast<int>(r / X.rows()) + 1; }

  std::vector<int> model_levels() const {
    std::vector<int> lv(source_trial.size());
    for (std::size_t k = 0; k < lv.size(); ++k) lv[k] = static_cast<int>(k) + 1;
    return lv;
  }

  // [X, one-hot(model_id)] stacked block by block.
  Matrix design() const {
    const Index n = X.rows();
    const int w = detail::onehot_width(model_levels());
    Matrix out = Matrix::Zero(rows(), X.cols() + w);
    for (int k = 0; k < K(); ++k) {
      out.block(k * n, 0, n, X.cols()) = X;
      if (w > 0) out.block(k * n, X.cols() + k, n, 1).setOnes();
    }
    return out;
  }
};

inline AugmentedDataset build_augmented_dataset(std::span<const CateModelPtr> local_models, const MultiTrialDataset& data) {
  data.validate();
  if (static_cast<int>(local_models.size()) != data.K())
    throw DataError("augmented dataset needs one local model per trial: got " + std::to_string(local_models.size()) +
                    " models for " + std::to_string(data.K()) + " trials");
  AugmentedDataset aug;
  aug.X = data.covariates;
  aug.source_trial = data.trial_ids;
  const Index n = data.rows();
  aug.cate.resize(n * data.K());
  for (int k = 0; k < data.K(); ++k) {
    // Each local model speaks for its own trial.
    const std::vector<int> ids(static_cast<std::size_t>(n), data.trial_ids[static_cast<std::size_t>(k)]);
    aug.cate.segment(k * n, n) = local_models[static_cast<std::size_t>(k)]->predict(data.covariates, ids);
  }
  return aug;
}

enum class EnsembleKind { tree, forest, lasso };

inline std::string to_string(EnsembleKind k) {
  switch (k) {
    case EnsembleKind::tree: return "tree";
    case EnsembleKind::forest: return "forest";
    case EnsembleKind::lasso: return "lasso";
  }
  return "?";
}

inline EnsembleKind ensemble_kind_from_string(const std::string& s) {
  if (s == "tree") return EnsembleKind::tree;
  if (s == "forest") return EnsembleKind::forest;
  if (s == "lasso") return EnsembleKind::lasso;
  throw DataError("unknown ensemble kind '" + s + "' (expected tree, forest or lasso)");
}

struct EnsembleParams {
  // CART: a node splits only if it has >= 20 rows and the split removes at
  // least `tree_complexity` times the root sum of squares.
  TreeParams tree{30, 20, 0.0};
  double tree_complexity = 0.01;
  ForestParams forest{};
  LassoOptions lasso{};
};

class EnsembleModel final : public CateModel {
 public:
  EnsembleKind ensemble = EnsembleKind::forest;
  std::vector<int> source_trial;  // model id k + 1 <-> trial source_trial[k]
  int covariates = 0;
  TreeModel tree;
  ForestModel forest;
  LassoModel lasso;

  CateKind kind() const override { return CateKind::ensemble; }
  int feature_count() const override { return covariates; }

  double predict_one(std::span<const double> x, std::optional<int> trial) const override {
    if (!trial) throw DataError("ensemble models need a trial id to predict");
    const auto row = detail::onehot_row(x, model_for(*trial), levels(), "model id");
    switch (ensemble) {
      case EnsembleKind::tree: return tree.predict_row(row);
      case EnsembleKind::forest: return forest.predict_row(row);
      case EnsembleKind::lasso: return lasso.predict_row(row);
    }
    return 0.0;
  }

  Vector predict(const Matrix& X, std::span<const int> trials = {}) const override {
    check_input(X, trials);
    if (trials.empty() && X.rows() > 0) throw DataError("ensemble models need a trial id to predict");
    std::vector<int> ids(trials.size());
    for (std::size_t i = 0; i < trials.size(); ++i) ids[i] = model_for(trials[i]);
    const Matrix design = detail::append_onehot(X, ids, levels(), "model id");
    switch (ensemble) {
      case EnsembleKind::tree: return tree.predict(design);
      case EnsembleKind::forest: return forest.predict(design);
      case EnsembleKind::lasso: return lasso.predict(design);
    }
    return Vector::Zero(X.rows());
  }

  Json to_json() const override {
    Json j{{"kind", "ensemble"},
           {"ensemble", to_string(ensemble)},
           {"source_trial", source_trial},
           {"feature_count", covariates}};
    switch (ensemble) {
      case EnsembleKind::tree: j["tree"] = json_io::tree_to_json(tree); break;
      case EnsembleKind::forest: j["forest"] = json_io::forest_to_json(forest); break;
      case EnsembleKind::lasso: j["lasso"] = json_io::lasso_to_json(lasso); break;
    }
    return j;
  }

  static std::shared_ptr<EnsembleModel> from_json(const Json& j) {
    auto m = std::make_shared<EnsembleModel>();
    m->ensemble = ensemble_kind_from_string(j.at("ensemble").get<std::string>());
    m->source_trial = j.at("source_trial").get<std::vector<int>>();
    m->covariates = j.at("feature_count").get<int>();
    switch (m->ensemble) {
      case EnsembleKind::tree: m->tree = json_io::tree_from_json(j.at("tree")); break;
      case EnsembleKind::forest: m->forest = json_io::forest_from_json(j.at("forest")); break;
      case EnsembleKind::lasso: m->lasso = json_io::lasso_from_json(j.at("lasso")); break;
    }
    return m;
  }

 private:
  std::vector<int> levels() const {
    std::vector<int> lv(source_trial.size());
    for (std::size_t k = 0; k < lv.size(); ++k) lv[k] = static_cast<int>(k) + 1;
    return lv;
  }

  int model_for(int trial) const { return detail::level_index(source_trial, trial, "trial id") + 1; }
};

// Regresses the augmented CATE estimates on [X, one-hot(model_id)].
inline std::shared_ptr<EnsembleModel> fit_ensemble(const AugmentedDataset& aug, EnsembleKind kind,
                                                   const EnsembleParams& params = {}) {
  if (aug.rows() == 0 || aug.K() == 0) throw DataError("ensemble: augmented dataset is empty");
  if (aug.rows() != aug.individuals() * aug.K()) throw DataError("ensemble: augmented dataset is malformed");
  auto m = std::make_shared<EnsembleModel>();
  m->ensemble = kind;
  m->source_trial = aug.source_trial;
  m->covariates = static_cast<int>(aug.X.cols());
  const Matrix design = aug.design();
  switch (kind) {
    case EnsembleKind::tree: {
      TreeParams tp = params.tree;
      const double sst = (aug.cate.array() - aug.cate.mean()).square().sum();
      tp.min_split_gain = std::max(tp.min_split_gain, params.tree_complexity * sst);
      m->tree = fit_regression_tree(design, aug.cate, tp);
      break;
    }
    case EnsembleKind::forest: m->forest = fit_regression_forest(design, aug.cate, params.forest); break;
    case EnsembleKind::lasso: m->lasso = fit_lasso(design, aug.cate, params.lasso); break;
  }
  return m;
}

}  // namespace mtcate
