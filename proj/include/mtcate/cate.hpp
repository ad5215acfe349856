#pragma once

#include "mtcate/data.hpp"
#include "mtcate/forest.hpp"
#include "mtcate/json_io.hpp"
#include "mtcate/rng.hpp"

#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace mtcate {

enum class CateKind { s_learner, x_learner, causal_forest, pooled, ensemble, meta };

inline std::string to_string(CateKind k) {
  switch (k) {
    case CateKind::s_learner: return "s_learner";
    case CateKind::x_learner: return "x_learner";
    case CateKind::causal_forest: return "causal_forest";
    case CateKind::pooled: return "pooled";
    case CateKind::ensemble: return "ensemble";
    case CateKind::meta: return "meta";
  }
  return "unknown";
}

// A fitted map (covariate row, optional trial id) -> CATE estimate. Every
// learner and aggregation strategy produces one.
class CateModel {
 public:
  virtual ~CateModel() = default;
  virtual CateKind kind() const = 0;
  // Width of the covariate rows accepted by predict.
  virtual int feature_count() const = 0;
  virtual double predict_one(std::span<const double> x, std::optional<int> trial = std::nullopt) const = 0;

  // `trials` is empty (no trial ids) or holds one id per row.
  virtual Vector predict(const Matrix& X, std::span<const int> trials = {}) const {
    check_input(X, trials);
    Vector out(X.rows());
    std::vector<double> row(static_cast<std::size_t>(X.cols()));
    for (Index i = 0; i < X.rows(); ++i) {
      for (Index j = 0; j < X.cols(); ++j) row[static_cast<std::size_t>(j)] = X(i, j);
      out[i] = predict_one(row, trials.empty() ? std::nullopt : std::optional<int>(trials[static_cast<std::size_t>(i)]));
    }
    return out;
  }

  virtual Json to_json() const = 0;

 protected:
  void check_input(const Matrix& X, std::span<const int> trials) const {
    if (X.cols() != feature_count())
      throw DataError(to_string(kind()) + " model expects " + std::to_string(feature_count()) +
                      " covariates, got " + std::to_string(X.cols()));
    if (!trials.empty() && static_cast<Index>(trials.size()) != X.rows())
      throw DataError("trial id count does not match row count");
  }
};

using CateModelPtr = std::shared_ptr<const CateModel>;

// Rows handed to a single-study learner. `trial` is optional (empty when the
// caller drops trial membership).
struct StudyData {
  Matrix X;
  std::vector<int> treat;
  Vector y;
  std::vector<int> trial;

  Index rows() const { return X.rows(); }

  static StudyData from(const MultiTrialDataset& d, bool keep_trial = true) {
    StudyData s{d.covariates, d.treatment, d.outcome, {}};
    if (keep_trial) s.trial = d.trial;
    return s;
  }

  std::pair<int, int> arm_counts() const {
    int treated = 0;
    for (int a : treat) treated += a;
    return {treated, static_cast<int>(treat.size()) - treated};
  }

  void check() const {
    if (X.rows() == 0) throw DataError("learner received no rows");
    if (static_cast<Index>(treat.size()) != X.rows() || y.size() != X.rows())
      throw DataError("learner input columns have inconsistent lengths");
    if (!trial.empty() && static_cast<Index>(trial.size()) != X.rows())
      throw DataError("trial column length mismatch");
    for (int a : treat)
      if (a != 0 && a != 1) throw DataError("treatment must be 0 or 1");
  }
};

namespace detail {

inline ForestParams with_seed(ForestParams p, std::string_view tag) {
  p.seed = derive_seed(p.seed, {hash_tag(tag)});
  return p;
}

inline Matrix select_rows(const Matrix& X, const std::vector<int>& rows) {
  Matrix out(static_cast<Index>(rows.size()), X.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Index>(i)) = X.row(rows[i]);
  return out;
}

inline Vector select_rows(const Vector& v, const std::vector<int>& rows) {
  Vector out(static_cast<Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) out[static_cast<Index>(i)] = v[rows[i]];
  return out;
}

inline std::pair<std::vector<int>, std::vector<int>> split_arms(const std::vector<int>& treat) {
  std::pair<std::vector<int>, std::vector<int>> arms;
  for (std::size_t i = 0; i < treat.size(); ++i) (treat[i] ? arms.first : arms.second).push_back(static_cast<int>(i));
  return arms;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// S-learner
// ---------------------------------------------------------------------------

// One outcome forest over [X, A]; the CATE is the forest evaluated at A = 1
// minus at A = 0.
class SLearnerModel final : public CateModel {
 public:
  ForestModel joint_outcome_forest;

  CateKind kind() const override { return CateKind::s_learner; }
  int feature_count() const override { return joint_outcome_forest.feature_count - 1; }

  double predict_one(std::span<const double> x, std::optional<int>) const override {
    std::vector<double> row(x.begin(), x.end());
    row.push_back(1.0);
    const double treated = joint_outcome_forest.predict_row(row);
    row.back() = 0.0;
    return treated - joint_outcome_forest.predict_row(row);
  }

  Vector predict(const Matrix& X, std::span<const int> trials = {}) const override {
    check_input(X, trials);
    Matrix design(X.rows(), X.cols() + 1);
    design.leftCols(X.cols()) = X;
    design.col(X.cols()).setOnes();
    const Vector treated = joint_outcome_forest.predict(design);
    design.col(X.cols()).setZero();
    return treated - joint_outcome_forest.predict(design);
  }

  Json to_json() const override {
    return {{"kind", "s_learner"}, {"joint_outcome_forest", json_io::forest_to_json(joint_outcome_forest)}};
  }

  static std::shared_ptr<SLearnerModel> from_json(const Json& j) {
    auto m = std::make_shared<SLearnerModel>();
    m->joint_outcome_forest = json_io::forest_from_json(j.at("joint_outcome_forest"));
    return m;
  }
};

inline std::shared_ptr<SLearnerModel> fit_s_learner(const StudyData& data, const ForestParams& params = {}) {
  data.check();
  const auto [treated, control] = data.arm_counts();
  if (treated == 0 || control == 0) throw DataError("S-learner needs both treatment arms");
  Matrix design(data.rows(), data.X.cols() + 1);
  design.leftCols(data.X.cols()) = data.X;
  for (Index i = 0; i < data.rows(); ++i) design(i, data.X.cols()) = data.treat[static_cast<std::size_t>(i)];
  auto m = std::make_shared<SLearnerModel>();
  m->joint_outcome_forest = fit_regression_forest(design, data.y, params);
  return m;
}

// ---------------------------------------------------------------------------
// X-learner
// ---------------------------------------------------------------------------

enum class WeightSource { fixed_constant, per_trial_empirical, logistic };

inline std::string to_string(WeightSource w) {
  switch (w) {
    case WeightSource::fixed_constant: return "fixed_constant";
    case WeightSource::per_trial_empirical: return "per_trial_empirical";
    case WeightSource::logistic: return "logistic";
  }
  return "unknown";
}

inline WeightSource weight_source_from_string(const std::string& s) {
  if (s == "fixed_constant") return WeightSource::fixed_constant;
  if (s == "per_trial_empirical") return WeightSource::per_trial_empirical;
  if (s == "logistic") return WeightSource::logistic;
  throw DataError("unknown X-learner weight source '" + s + "'");
}

struct XLearnerOptions {
  WeightSource weight_source = WeightSource::per_trial_empirical;
  double fixed_weight = 0.5;  // used by fixed_constant
};

// Combines per-arm effect forests as g(x) tau1(x) + (1 - g(x)) tau0(x).
class XLearnerModel final : public CateModel {
 public:
  ForestModel mu1_forest, mu0_forest, tau1_forest, tau0_forest;
  WeightSource weight_source = WeightSource::per_trial_empirical;
  double constant_weight = 0.5;           // fixed_constant, and the fallback without a known trial
  std::map<int, double> trial_weight;     // per_trial_empirical
  Vector logistic_coef;                   // logistic: intercept then slopes on raw covariates

  CateKind kind() const override { return CateKind::x_learner; }
  int feature_count() const override { return tau1_forest.feature_count; }

  double weight(std::span<const double> x, std::optional<int> trial) const {
    switch (weight_source) {
      case WeightSource::fixed_constant: return constant_weight;
      case WeightSource::per_trial_empirical: {
        if (trial) {
          const auto it = trial_weight.find(*trial);
          if (it != trial_weight.end()) return it->second;
        }
        return constant_weight;
      }
      case WeightSource::logistic: {
        double z = logistic_coef[0];
        for (std::size_t j = 0; j < x.size(); ++j) z += logistic_coef[static_cast<Index>(j + 1)] * x[j];
        return 1.0 / (1.0 + std::exp(-z));
      }
    }
    return constant_weight;
  }

  double predict_one(std::span<const double> x, std::optional<int> trial) const override {
    const double g = weight(x, trial);
    return g * tau1_forest.predict_row(x) + (1.0 - g) * tau0_forest.predict_row(x);
  }

  Vector predict(const Matrix& X, std::span<const int> trials = {}) const override {
    check_input(X, trials);
    const Vector t1 = tau1_forest.predict(X);
    const Vector t0 = tau0_forest.predict(X);
    Vector out(X.rows());
    std::vector<double> row(static_cast<std::size_t>(X.cols()));
    for (Index i = 0; i < X.rows(); ++i) {
      for (Index j = 0; j < X.cols(); ++j) row[static_cast<std::size_t>(j)] = X(i, j);
      const double g =
          weight(row, trials.empty() ? std::nullopt : std::optional<int>(trials[static_cast<std::size_t>(i)]));
      out[i] = g * t1[i] + (1.0 - g) * t0[i];
    }
    return out;
  }

  Json to_json() const override {
    Json weights = Json::object();
    for (auto [id, w] : trial_weight) weights[std::to_string(id)] = w;
    return {{"kind", "x_learner"},
            {"weight_source", to_string(weight_source)},
            {"constant_weight", constant_weight},
            {"trial_weight", weights},
            {"logistic_coef", json_io::vector_to_json(logistic_coef)},
            {"mu1_forest", json_io::forest_to_json(mu1_forest)},
            {"mu0_forest", json_io::forest_to_json(mu0_forest)},
            {"tau1_forest", json_io::forest_to_json(tau1_forest)},
            {"tau0_forest", json_io::forest_to_json(tau0_forest)}};
  }

  static std::shared_ptr<XLearnerModel> from_json(const Json& j) {
    auto m = std::make_shared<XLearnerModel>();
    m->weight_source = weight_source_from_string(j.at("weight_source").get<std::string>());
    m->constant_weight = j.at("constant_weight").get<double>();
    for (const auto& [k, v] : j.at("trial_weight").items()) m->trial_weight[std::stoi(k)] = v.get<double>();
    m->logistic_coef = json_io::vector_from_json(j.at("logistic_coef"));
    m->mu1_forest = json_io::forest_from_json(j.at("mu1_forest"));
    m->mu0_forest = json_io::forest_from_json(j.at("mu0_forest"));
    m->tau1_forest = json_io::forest_from_json(j.at("tau1_forest"));
    m->tau0_forest = json_io::forest_from_json(j.at("tau0_forest"));
    return m;
  }
};

// Three steps: per-arm outcome forests, cross-imputed individual effects, and
// per-arm effect forests blended by a propensity-style weight.
inline std::shared_ptr<XLearnerModel> fit_x_learner(const StudyData& data, const ForestParams& params = {},
                                                    const XLearnerOptions& opt = {}) {
  data.check();
  const auto [treated_rows, control_rows] = detail::split_arms(data.treat);
  const int min_arm = params.tree_params.min_node_size;
  if (static_cast<int>(treated_rows.size()) < min_arm || static_cast<int>(control_rows.size()) < min_arm ||
      treated_rows.empty() || control_rows.empty())
    throw DataError("X-learner: each arm needs at least min_node_size (" + std::to_string(min_arm) + ") rows, got " +
                    std::to_string(treated_rows.size()) + " treated and " + std::to_string(control_rows.size()) +
                    " control");
  const Matrix X1 = detail::select_rows(data.X, treated_rows);
  const Matrix X0 = detail::select_rows(data.X, control_rows);
  const Vector y1 = detail::select_rows(data.y, treated_rows);
  const Vector y0 = detail::select_rows(data.y, control_rows);

  auto m = std::make_shared<XLearnerModel>();
  m->mu1_forest = fit_regression_forest(X1, y1, detail::with_seed(params, "x-mu1"));
  m->mu0_forest = fit_regression_forest(X0, y0, detail::with_seed(params, "x-mu0"));
  const Vector d1 = y1 - m->mu0_forest.predict(X1);
  const Vector d0 = m->mu1_forest.predict(X0) - y0;
  m->tau1_forest = fit_regression_forest(X1, d1, detail::with_seed(params, "x-tau1"));
  m->tau0_forest = fit_regression_forest(X0, d0, detail::with_seed(params, "x-tau0"));

  m->weight_source = opt.weight_source;
  const double overall = static_cast<double>(treated_rows.size()) / static_cast<double>(data.rows());
  switch (opt.weight_source) {
    case WeightSource::fixed_constant:
      if (!(opt.fixed_weight >= 0.0 && opt.fixed_weight <= 1.0)) throw DataError("X-learner weight must be in [0, 1]");
      m->constant_weight = opt.fixed_weight;
      break;
    case WeightSource::per_trial_empirical: {
      m->constant_weight = overall;
      std::map<int, std::pair<double, double>> counts;
      for (std::size_t i = 0; i < data.trial.size(); ++i) {
        auto& c = counts[data.trial[i]];
        c.first += data.treat[i];
        c.second += 1.0;
      }
      for (const auto& [id, c] : counts) m->trial_weight[id] = c.first / c.second;
      break;
    }
    case WeightSource::logistic: {
      m->constant_weight = overall;
      std::vector<int> klass(data.treat.begin(), data.treat.end());
      const auto fit = fit_multinomial_logit(data.X, klass, 2);
      // Fold the standardization into coefficients on the raw scale.
      const Index p = data.X.cols();
      m->logistic_coef = Vector::Zero(p + 1);
      m->logistic_coef[0] = fit.coef(0, 0);
      for (Index j = 0; j < p; ++j) {
        if (fit.sd[j] <= 0) continue;
        const double b = fit.coef(0, j + 1) / fit.sd[j];
        m->logistic_coef[j + 1] = b;
        m->logistic_coef[0] -= b * fit.mean[j];
      }
      break;
    }
  }
  return m;
}

}  // namespace mtcate
