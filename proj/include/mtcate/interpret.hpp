#pragma once

#include "mtcate/aggregate.hpp"
#include "mtcate/causal_forest.hpp"
#include "mtcate/ols.hpp"

#include <cmath>
#include <functional>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

namespace mtcate {

// ---------------------------------------------------------------------------
// Split-count variable importance
// ---------------------------------------------------------------------------

struct ImportanceTable {
  std::vector<std::string> features;
  std::vector<double> weights;  // sum to 1 unless no_splits
  double decay = 0.5;
  int max_depth = 4;
  bool no_splits = false;
};

inline std::vector<std::string> default_feature_names(int p) {
  std::vector<std::string> out;
  for (int j = 0; j < p; ++j) out.push_back("x" + std::to_string(j + 1));
  return out;
}

// importance_j proportional to sum over depths d = 1..max_depth (root = 1)
// of decay^(d-1) * (number of splits on j at depth d, over all trees).
inline ImportanceTable variable_importance(std::span<const TreeModel> trees, int feature_count, double decay = 0.5,
                                           int max_depth = 4, std::vector<std::string> names = {}) {
  if (!(decay > 0.0)) throw DataError("importance decay must be > 0");
  if (max_depth < 1) throw DataError("importance max_depth must be >= 1");
  if (names.empty()) names = default_feature_names(feature_count);
  if (static_cast<int>(names.size()) != feature_count) throw DataError("importance: feature name count mismatch");
  ImportanceTable t;
  t.features = std::move(names);
  t.decay = decay;
  t.max_depth = max_depth;
  t.weights.assign(static_cast<std::size_t>(feature_count), 0.0);
  const auto tally = tally_splits(trees, feature_count, max_depth);
  double total = 0.0;
  for (const auto& tree : tally)
    for (int j = 0; j < feature_count; ++j)
      for (int d = 0; d < max_depth; ++d) {
        const double w = std::pow(decay, d) * tree[static_cast<std::size_t>(j)][static_cast<std::size_t>(d)];
        t.weights[static_cast<std::size_t>(j)] += w;
        total += w;
      }
  if (total <= 0.0) {
    t.no_splits = true;
    return t;
  }
  for (auto& w : t.weights) w /= total;
  return t;
}

inline ImportanceTable variable_importance(const ForestModel& f, double decay = 0.5, int max_depth = 4,
                                           std::vector<std::string> names = {}) {
  return variable_importance(f.trees, f.feature_count, decay, max_depth, std::move(names));
}

inline ImportanceTable variable_importance(const CausalForestModel& f, double decay = 0.5, int max_depth = 4,
                                           std::vector<std::string> names = {}) {
  return variable_importance(f.trees, f.features, decay, max_depth, std::move(names));
}

inline void write_importance_csv(const ImportanceTable& t, std::ostream& out) {
  out << "feature,importance\n";
  for (std::size_t j = 0; j < t.features.size(); ++j)
    out << t.features[j] << ',' << csv::format_double(t.weights[j]) << '\n';
}

// ---------------------------------------------------------------------------
// Interpretation tree
// ---------------------------------------------------------------------------

inline TreeParams default_interpretation_tree_params() { return TreeParams{3, 20, 0.0}; }

// CART of the CATE estimates on the covariates; leaves hold member means.
inline TreeModel fit_interpretation_tree(const Vector& cates, const Matrix& X,
                                         const TreeParams& params = default_interpretation_tree_params()) {
  if (cates.size() != X.rows())
    throw DataError("interpretation tree: " + std::to_string(cates.size()) + " CATEs for " + std::to_string(X.rows()) +
                    " rows");
  return fit_regression_tree(X, cates, params);
}

// Indented outline, one node per line:
//   x1 <= 0.25 (n = 120, mean CATE = 0.81)
inline std::string render_tree_text(const TreeModel& tree, const std::vector<std::string>& names,
                                    const Matrix* X = nullptr) {
  std::vector<int> counts(tree.nodes.size(), -1);
  if (X != nullptr) {
    std::fill(counts.begin(), counts.end(), 0);
    for (Index i = 0; i < X->rows(); ++i) {
      int k = 0;
      while (true) {
        ++counts[static_cast<std::size_t>(k)];
        const auto& nd = tree.nodes[static_cast<std::size_t>(k)];
        if (nd.is_leaf()) break;
        k = nd.left + static_cast<int>(!((*X)(i, nd.feature) <= nd.threshold));
      }
    }
  }
  auto stats = [&](int k) {
    std::ostringstream s;
    s << "(";
    if (counts[static_cast<std::size_t>(k)] >= 0) s << "n = " << counts[static_cast<std::size_t>(k)] << ", ";
    s << "mean CATE = " << std::setprecision(4) << tree.nodes[static_cast<std::size_t>(k)].value << ")";
    return s.str();
  };
  auto name = [&](int j) { return j < static_cast<int>(names.size()) ? names[static_cast<std::size_t>(j)] : "x" + std::to_string(j + 1); };
  std::ostringstream out;
  out << "root " << stats(0) << "\n";
  std::function<void(int, int)> walk = [&](int k, int indent) {
    const auto& nd = tree.nodes[static_cast<std::size_t>(k)];
    if (nd.is_leaf()) return;
    for (const int child : {nd.left, nd.right}) {
      const bool leaf = tree.nodes[static_cast<std::size_t>(child)].is_leaf();
      out << std::string(static_cast<std::size_t>(indent) * 2, ' ') << name(nd.feature)
          << (child == nd.left ? " <= " : " > ") << std::setprecision(6) << nd.threshold << " " << stats(child)
          << (leaf ? " *" : "") << "\n";
      walk(child, indent + 1);
    }
  };
  walk(0, 1);
  return out.str();
}

// ---------------------------------------------------------------------------
// Doubly-robust scores and the best linear projection
// ---------------------------------------------------------------------------

// Gamma_i = tau(x_i) + (A_i - pi_i) / (pi_i (1 - pi_i)) * (Y_i - mu(x_i, A_i)),
// mu(x, a) = m(x) + (a - pi) tau(x).
inline Vector dr_scores(const Vector& tau_hat, const Vector& m_hat, const std::vector<int>& treat, const Vector& y,
                        const Vector& pi) {
  const Index n = y.size();
  if (tau_hat.size() != n || m_hat.size() != n || static_cast<Index>(treat.size()) != n || pi.size() != n)
    throw DataError("dr_scores: input lengths differ");
  Vector g(n);
  for (Index i = 0; i < n; ++i) {
    const double p = pi[i];
    if (!(p > 0.0 && p < 1.0))
      throw DataError("row " + std::to_string(i + 1) + ": propensity " + csv::format_double(p) +
                      " is not strictly between 0 and 1");
    const double a = treat[static_cast<std::size_t>(i)];
    const double mu = m_hat[i] + (a - p) * tau_hat[i];
    g[i] = tau_hat[i] + (a - p) / (p * (1.0 - p)) * (y[i] - mu);
  }
  return g;
}

// Per-row treated fraction of the row's own trial.
inline Vector per_trial_propensity(const MultiTrialDataset& data) {
  std::vector<double> treated(static_cast<std::size_t>(data.K()), 0.0), total(static_cast<std::size_t>(data.K()), 0.0);
  for (Index i = 0; i < data.rows(); ++i) {
    const auto k = static_cast<std::size_t>(data.trial_index(data.trial[static_cast<std::size_t>(i)]));
    treated[k] += data.treatment[static_cast<std::size_t>(i)];
    total[k] += 1.0;
  }
  Vector pi(data.rows());
  for (Index i = 0; i < data.rows(); ++i) {
    const auto k = static_cast<std::size_t>(data.trial_index(data.trial[static_cast<std::size_t>(i)]));
    pi[i] = treated[k] / total[k];
  }
  return pi;
}

// CATE estimates for the rows a model was trained on: out-of-bag for causal
// forests (directly or inside pooling) so the scores are not overfit.
inline Vector training_cate(const CateModel& model, const MultiTrialDataset& data) {
  if (const auto* cf = dynamic_cast<const CausalForestModel*>(&model); cf && !cf->inbag.empty())
    return cf->predict_oob(data.covariates);
  if (const auto* pm = dynamic_cast<const PooledModel*>(&model)) {
    if (const auto* cf = dynamic_cast<const CausalForestModel*>(pm->inner.get()); cf && !cf->inbag.empty()) {
      if (!pm->indicator) return cf->predict_oob(data.covariates);
      return cf->predict_oob(detail::append_onehot(data.covariates, data.trial, pm->trial_ids, "trial id"));
    }
  }
  return model.predict(data.covariates, data.trial);
}

struct BlpOptions {
  std::vector<std::string> covariates;  // empty: all
  bool trial_indicators = true;         // K - 1 dummies, first trial as reference
  RobustSE robust = RobustSE::hc3;
  ForestParams outcome_forest{};        // for m(x)
  std::optional<Vector> propensity;     // per row; default per-trial treated fraction
};

struct BlpResult {
  CoefTable table;
  Vector scores;
};

// Regresses doubly-robust scores on the chosen covariates (plus trial
// indicators) with heteroskedasticity-robust standard errors.
inline BlpResult best_linear_projection(const CateModel& model, const MultiTrialDataset& data,
                                        const BlpOptions& opt = {}) {
  data.validate();
  std::vector<int> cols;
  std::vector<std::string> names;
  if (opt.covariates.empty()) {
    for (int j = 0; j < data.p(); ++j) cols.push_back(j);
  } else {
    for (const auto& c : opt.covariates) {
      const auto it = std::find(data.covariate_names.begin(), data.covariate_names.end(), c);
      if (it == data.covariate_names.end()) throw DataError("best linear projection: unknown covariate '" + c + "'");
      cols.push_back(static_cast<int>(it - data.covariate_names.begin()));
    }
  }
  for (int c : cols) names.push_back(data.covariate_names[static_cast<std::size_t>(c)]);

  const Vector pi = opt.propensity ? *opt.propensity : per_trial_propensity(data);
  const Vector tau = training_cate(model, data);
  const ForestModel mf = fit_regression_forest(data.covariates, data.outcome, opt.outcome_forest);
  const Vector m_hat = mf.predict_oob(data.covariates);

  BlpResult out;
  out.scores = dr_scores(tau, m_hat, data.treatment, data.outcome, pi);
  const int dummies = opt.trial_indicators ? data.K() - 1 : 0;
  Matrix Z(data.rows(), static_cast<Index>(cols.size()) + dummies);
  for (std::size_t j = 0; j < cols.size(); ++j) Z.col(static_cast<Index>(j)) = data.covariates.col(cols[j]);
  for (int k = 1; k <= dummies; ++k) {
    const int id = data.trial_ids[static_cast<std::size_t>(k)];
    names.push_back("trial:" + std::to_string(id));
    for (Index i = 0; i < data.rows(); ++i)
      Z(i, static_cast<Index>(cols.size()) + k - 1) = data.trial[static_cast<std::size_t>(i)] == id ? 1.0 : 0.0;
  }
  OlsOptions o;
  o.names = names;
  o.robust = opt.robust;
  out.table = fit_ols(Z, out.scores, o);
  return out;
}

// Estimate, Std. Error, P-Value rows.
inline void write_coef_csv(const CoefTable& t, std::ostream& out) {
  out << "term,estimate,std_error,t_value,p_value\n";
  for (const auto& r : t.rows)
    out << r.name << ',' << csv::format_double(r.estimate) << ',' << csv::format_double(r.std_error) << ','
        << csv::format_double(r.t_value) << ',' << csv::format_double(r.p_value) << '\n';
}

}  // namespace mtcate
