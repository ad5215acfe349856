#pragma once

#include "mtcate/rng.hpp"
#include "mtcate/types.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

namespace mtcate {

struct LassoOptions {
  std::optional<double> lambda;  // empty selects lambda by cross-validation
  int n_lambda = 100;
  double lambda_min_ratio = 1e-4;  // path spans four decades below lambda_max
  int folds = 10;
  std::uint64_t seed = 1;
  double tolerance = 1e-7;
  int max_sweeps = 100000;
  bool record_objective = false;
};

struct LassoModel {
  double intercept = 0.0;
  Vector coefficients;  // original scale
  double lambda = 0.0;
  Vector feature_mean;
  Vector feature_sd;  // population sd; 0 marks a dropped constant feature
  std::vector<double> cv_lambdas;
  std::vector<double> cv_errors;
  // Standardized-scale objective after each coordinate-descent sweep of the
  // final fit (only when requested).
  std::vector<double> objective_trace;
  int sweeps = 0;

  double predict_row(std::span<const double> x) const {
    double s = intercept;
    for (Index j = 0; j < coefficients.size(); ++j) s += coefficients[j] * x[static_cast<std::size_t>(j)];
    return s;
  }

  Vector predict(const Matrix& X) const {
    if (X.cols() != coefficients.size()) throw DataError("lasso: feature count mismatch");
    return (X * coefficients).array() + intercept;
  }
};

inline double soft_threshold(double z, double lambda) {
  if (z > lambda) return z - lambda;
  if (z < -lambda) return z + lambda;
  return 0.0;
}

namespace detail {

// Sufficient statistics of a standardized design restricted to a row subset.
struct LassoGram {
  Vector mean, sd;
  Matrix gram;  // Xs' Xs / n
  Vector xty;   // Xs' (y - ybar) / n
  double ymean = 0.0;
  double yy = 0.0;  // (y - ybar)'(y - ybar) / n
};

inline LassoGram lasso_gram(const Matrix& X, const Vector& y, std::span<const int> rows) {
  const Index p = X.cols();
  const auto n = static_cast<Index>(rows.size());
  Matrix Xs(n, p);
  Vector yc(n);
  for (Index i = 0; i < n; ++i) {
    Xs.row(i) = X.row(rows[static_cast<std::size_t>(i)]);
    yc[i] = y[rows[static_cast<std::size_t>(i)]];
  }
  LassoGram g;
  g.mean = Xs.colwise().mean().transpose();
  g.ymean = yc.mean();
  Xs.rowwise() -= g.mean.transpose();
  yc.array() -= g.ymean;
  g.sd = (Xs.colwise().squaredNorm().transpose() / static_cast<double>(n)).cwiseSqrt();
  for (Index j = 0; j < p; ++j) {
    if (g.sd[j] > 1e-12 * std::max(1.0, std::fabs(g.mean[j]))) {
      Xs.col(j) /= g.sd[j];
    } else {
      g.sd[j] = 0.0;
      Xs.col(j).setZero();
    }
  }
  g.gram = Matrix(Xs.transpose() * Xs) / static_cast<double>(n);
  g.xty = Xs.transpose() * yc / static_cast<double>(n);
  g.yy = yc.squaredNorm() / static_cast<double>(n);
  return g;
}

inline double lasso_objective(const LassoGram& g, const Vector& beta, double lambda) {
  return 0.5 * g.yy - g.xty.dot(beta) + 0.5 * beta.dot(g.gram * beta) + lambda * beta.lpNorm<1>();
}

// Cyclic coordinate descent in covariance form; beta is warm-started in place.
inline int coordinate_descent(const LassoGram& g, double lambda, Vector& beta, const LassoOptions& opt,
                              std::vector<double>* trace) {
  const Index p = beta.size();
  Vector gb = g.gram * beta;
  for (int sweep = 1; sweep <= opt.max_sweeps; ++sweep) {
    double max_delta = 0.0;
    for (Index j = 0; j < p; ++j) {
      const double gjj = g.gram(j, j);
      if (g.sd[j] == 0.0 || gjj <= 0.0) continue;
      const double z = g.xty[j] - gb[j] + gjj * beta[j];
      const double updated = soft_threshold(z, lambda) / gjj;
      const double delta = updated - beta[j];
      if (delta != 0.0) {
        beta[j] = updated;
        gb.noalias() += delta * g.gram.col(j);
        max_delta = std::max(max_delta, std::fabs(delta));
      }
    }
    if (trace != nullptr) trace->push_back(lasso_objective(g, beta, lambda));
    if (max_delta < opt.tolerance) return sweep;
  }
  throw NumericalError("lasso: coordinate descent did not converge in " + std::to_string(opt.max_sweeps) +
                       " sweeps");
}

inline std::vector<double> lambda_path(double lambda_max, const LassoOptions& opt) {
  std::vector<double> path(static_cast<std::size_t>(opt.n_lambda));
  const double lo = std::log(lambda_max * opt.lambda_min_ratio);
  const double hi = std::log(lambda_max);
  for (int k = 0; k < opt.n_lambda; ++k)
    path[static_cast<std::size_t>(k)] =
        opt.n_lambda == 1 ? lambda_max : std::exp(hi + (lo - hi) * k / static_cast<double>(opt.n_lambda - 1));
  return path;
}

inline void to_original_scale(const LassoGram& g, const Vector& beta, LassoModel& m) {
  m.feature_mean = g.mean;
  m.feature_sd = g.sd;
  m.coefficients = Vector::Zero(beta.size());
  m.intercept = g.ymean;
  for (Index j = 0; j < beta.size(); ++j) {
    if (g.sd[j] == 0.0) continue;
    m.coefficients[j] = beta[j] / g.sd[j];
    m.intercept -= m.coefficients[j] * g.mean[j];
  }
}

}  // namespace detail

// Lasso by cyclic coordinate descent on standardized features, minimizing
// (1/2n)|y - b0 - X b|^2 + lambda |b|_1. Constant features are dropped
// (coefficient 0). Without a fixed lambda, 10-fold cross-validation over a
// log-spaced path picks the lambda with the smallest mean held-out error.
inline LassoModel fit_lasso(const Matrix& X, const Vector& y, const LassoOptions& opt = {}) {
  if (X.rows() == 0 || X.rows() != y.size()) throw DataError("lasso: empty or mismatched input");
  if (!X.allFinite() || !y.allFinite()) throw DataError("lasso: non-finite input");
  if (opt.lambda && !(*opt.lambda >= 0.0)) throw DataError("lasso: lambda must be >= 0");
  const Index n = X.rows();
  const Index p = X.cols();
  std::vector<int> all(static_cast<std::size_t>(n));
  std::iota(all.begin(), all.end(), 0);
  const auto full = detail::lasso_gram(X, y, all);
  const double lambda_max = p > 0 ? full.xty.cwiseAbs().maxCoeff() : 0.0;

  LassoModel model;
  double chosen = 0.0;
  std::vector<double> path;
  if (opt.lambda) {
    chosen = *opt.lambda;
  } else if (lambda_max <= 0.0) {
    chosen = 0.0;
  } else {
    if (opt.folds < 2 || n < opt.folds) throw DataError("lasso: cross-validation needs at least `folds` rows");
    path = detail::lambda_path(lambda_max, opt);
    // Seeded shuffle, then contiguous folds.
    auto rng = make_rng(opt.seed, {hash_tag("lasso-cv")});
    std::vector<int> perm = all;
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<double> err(path.size(), 0.0);
    for (int f = 0; f < opt.folds; ++f) {
      const Index lo = n * f / opt.folds;
      const Index hi = n * (f + 1) / opt.folds;
      std::vector<int> train, test;
      for (Index i = 0; i < n; ++i) (i >= lo && i < hi ? test : train).push_back(perm[static_cast<std::size_t>(i)]);
      const auto g = detail::lasso_gram(X, y, train);
      Matrix Xt(static_cast<Index>(test.size()), p);
      Vector yt(static_cast<Index>(test.size()));
      for (std::size_t i = 0; i < test.size(); ++i) {
        Xt.row(static_cast<Index>(i)) = X.row(test[i]);
        yt[static_cast<Index>(i)] = y[test[i]];
      }
      Vector beta = Vector::Zero(p);
      LassoModel fold_model;
      for (std::size_t k = 0; k < path.size(); ++k) {
        detail::coordinate_descent(g, path[k], beta, opt, nullptr);
        detail::to_original_scale(g, beta, fold_model);
        err[k] += (yt - fold_model.predict(Xt)).squaredNorm() / static_cast<double>(test.size());
      }
    }
    for (auto& e : err) e /= opt.folds;
    const auto best = std::min_element(err.begin(), err.end()) - err.begin();
    chosen = path[static_cast<std::size_t>(best)];
    model.cv_lambdas = path;
    model.cv_errors = err;
  }

  // Warm-start down the path to the chosen lambda, then solve there.
  Vector beta = Vector::Zero(p);
  for (double lam : path) {
    if (lam <= chosen) break;
    detail::coordinate_descent(full, lam, beta, opt, nullptr);
  }
  if (opt.record_objective) model.objective_trace.push_back(detail::lasso_objective(full, beta, chosen));
  model.sweeps = detail::coordinate_descent(full, chosen, beta, opt, opt.record_objective ? &model.objective_trace : nullptr);
  model.lambda = chosen;
  detail::to_original_scale(full, beta, model);
  return model;
}

inline LassoModel fit_lasso(const Matrix& X, const Vector& y, double lambda) {
  LassoOptions opt;
  opt.lambda = lambda;
  return fit_lasso(X, y, opt);
}

}  // namespace mtcate
