#pragma once

#include "mtcate/cate.hpp"

#include <gsl/gsl_errno.h>
#include <gsl/gsl_multimin.h>

#include <Eigen/Cholesky>

#include <array>
#include <cmath>
#include <map>
#include <memory>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace mtcate {

struct MetaOptions {
  int moderator_index = 1;  // 1-based covariate playing X1
  double tolerance = 1e-6;
  int max_iterations = 20000;
  int max_restarts = 5;
};

// Linear mixed model
//   Y = a0 + a1 X1 + ... + a4 X4 + zeta A + theta X1 A
//       + a_s + b_s X1 + z_s A + t_s X1 A + eps
// with independent normal random effects per trial. The CATE of trial s is
// (zeta + z_s) + (theta + t_s) X1.
class MetaAnalysisModel final : public CateModel {
 public:
  static constexpr std::array<const char*, 4> kRandomNames{"intercept", "X1", "A", "X1:A"};

  std::vector<std::string> fixed_names;  // "(Intercept)", X1..X4 names, "A", "X1:A"
  Vector fixed;                          // estimates in fixed_names order
  Vector fixed_se;
  std::map<int, std::array<double, 4>> random;  // BLUPs (a_s, b_s, z_s, t_s)
  std::array<double, 4> random_variance{};      // sigma_a^2, sigma_b^2, sigma_z^2, sigma_t^2
  double residual_variance = 0.0;
  int moderator_index = 1;
  std::vector<int> covariate_columns;  // 0-based columns used as X1, X2, ...
  int covariates = 0;
  double reml_deviance = 0.0;
  int iterations = 0;

  CateKind kind() const override { return CateKind::meta; }
  int feature_count() const override { return covariates; }

  double zeta() const { return fixed[static_cast<Index>(fixed.size() - 2)]; }
  double theta() const { return fixed[static_cast<Index>(fixed.size() - 1)]; }

  // Random effects of a known trial; without a trial id the population-level
  // effect (all BLUPs zero) is used.
  std::array<double, 4> blup(std::optional<int> trial) const {
    if (!trial) return {};
    const auto it = random.find(*trial);
    if (it == random.end()) throw DataError("meta-analysis has no random effects for trial " + std::to_string(*trial));
    return it->second;
  }

  static double cate(double zeta, double z_s, double theta, double t_s, double x1) {
    return (zeta + z_s) + (theta + t_s) * x1;
  }

  double predict_one(std::span<const double> x, std::optional<int> trial) const override {
    const auto b = blup(trial);
    return cate(zeta(), b[2], theta(), b[3], x[static_cast<std::size_t>(moderator_index - 1)]);
  }

  std::vector<bool> at_boundary() const {
    std::vector<bool> out;
    for (double v : random_variance) out.push_back(v <= 0.0);
    return out;
  }

  Json to_json() const override {
    Json fx = Json::array();
    for (std::size_t k = 0; k < fixed_names.size(); ++k)
      fx.push_back({{"name", fixed_names[k]},
                    {"estimate", fixed[static_cast<Index>(k)]},
                    {"std_error", fixed_se[static_cast<Index>(k)]}});
    Json re = Json::object();
    for (const auto& [id, b] : random) re[std::to_string(id)] = b;
    Json vc = Json::object();
    for (std::size_t k = 0; k < 4; ++k) vc[kRandomNames[k]] = random_variance[k];
    vc["residual"] = residual_variance;
    return {{"kind", "meta"},
            {"feature_count", covariates},
            {"moderator_index", moderator_index},
            {"covariate_columns", covariate_columns},
            {"fixed", fx},
            {"random", re},
            {"variance_components", vc},
            {"reml_deviance", reml_deviance},
            {"iterations", iterations}};
  }

  static std::shared_ptr<MetaAnalysisModel> from_json(const Json& j) {
    auto m = std::make_shared<MetaAnalysisModel>();
    m->covariates = j.at("feature_count").get<int>();
    m->moderator_index = j.at("moderator_index").get<int>();
    m->covariate_columns = j.at("covariate_columns").get<std::vector<int>>();
    const auto& fx = j.at("fixed");
    m->fixed.resize(static_cast<Index>(fx.size()));
    m->fixed_se.resize(static_cast<Index>(fx.size()));
    for (std::size_t k = 0; k < fx.size(); ++k) {
      m->fixed_names.push_back(fx[k].at("name").get<std::string>());
      m->fixed[static_cast<Index>(k)] = fx[k].at("estimate").get<double>();
      m->fixed_se[static_cast<Index>(k)] = fx[k].at("std_error").get<double>();
    }
    if (m->fixed.size() < 2) throw DataError("meta-analysis JSON has too few fixed effects");
    for (const auto& [k, v] : j.at("random").items()) m->random[std::stoi(k)] = v.get<std::array<double, 4>>();
    const auto& vc = j.at("variance_components");
    for (std::size_t k = 0; k < 4; ++k) m->random_variance[k] = vc.at(kRandomNames[k]).get<double>();
    m->residual_variance = vc.at("residual").get<double>();
    m->reml_deviance = j.value("reml_deviance", 0.0);
    m->iterations = j.value("iterations", 0);
    if (m->moderator_index < 1 || m->moderator_index > m->covariates)
      throw DataError("meta-analysis JSON has an invalid moderator_index");
    return m;
  }
};

namespace detail {

// Per-trial cross products; every REML evaluation works from these alone.
struct LmmGroup {
  int id = 0;
  Matrix ZtZ;  // 4 x 4
  Matrix ZtX;  // 4 x q
  Vector Zty;  // 4
};

struct LmmProblem {
  std::vector<LmmGroup> groups;
  Matrix XtX;
  Vector Xty;
  double yty = 0.0;
  Index n = 0;

  struct Solution {
    double deviance = 0.0;
    Vector beta;
    double sigma2 = 0.0;
    Matrix XtVX;
  };

  // -2 * restricted log-likelihood profiled over beta and sigma^2, for
  // relative random-effect scales theta (Lambda = diag(theta)).
  Solution solve(std::span<const double> theta) const {
    const Index q = XtX.rows();
    Matrix A = XtX;
    Vector b = Xty;
    double c = yty;
    double logdet = 0.0;
    const Vector lam = Eigen::Map<const Vector>(theta.data(), 4);
    for (const auto& g : groups) {
      Matrix C = lam.asDiagonal() * g.ZtZ * lam.asDiagonal();
      C.diagonal().array() += 1.0;
      Eigen::LLT<Matrix> llt(C);
      logdet += 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
      const Matrix W = lam.asDiagonal() * g.ZtX;
      const Vector w = lam.asDiagonal() * g.Zty;
      const Matrix CiW = llt.solve(W);
      const Vector Ciw = llt.solve(w);
      A.noalias() -= W.transpose() * CiW;
      b.noalias() -= W.transpose() * Ciw;
      c -= w.dot(Ciw);
    }
    Solution s;
    Eigen::LLT<Matrix> la(A);
    if (la.info() != Eigen::Success) throw NumericalError("meta-analysis: fixed-effect system is not positive definite");
    s.beta = la.solve(b);
    const double r = std::max(c - s.beta.dot(b), 1e-300);
    const double dfr = static_cast<double>(n - q);
    s.sigma2 = r / dfr;
    const double logdet_a = 2.0 * la.matrixL().toDenseMatrix().diagonal().array().log().sum();
    s.deviance = logdet + logdet_a + dfr * (1.0 + std::log(2.0 * std::numbers::pi * s.sigma2));
    s.XtVX = std::move(A);
    return s;
  }
};

inline double lmm_objective(const gsl_vector* v, void* params) {
  const auto* prob = static_cast<const LmmProblem*>(params);
  const std::array<double, 4> th{gsl_vector_get(v, 0), gsl_vector_get(v, 1), gsl_vector_get(v, 2),
                                 gsl_vector_get(v, 3)};
  // Exceptions must not cross the C library; a huge finite value steers the
  // simplex away instead.
  try {
    const double d = prob->solve(th).deviance;
    return std::isfinite(d) ? d : 1e300;
  } catch (const NumericalError&) {
    return 1e300;
  }
}

struct SimplexResult {
  std::array<double, 4> theta{};
  double value = 0.0;
  int iterations = 0;
  bool converged = false;
};

// Nelder-Mead from `start`; converged when the simplex size drops below tol.
inline SimplexResult run_simplex(const LmmProblem& prob, std::array<double, 4> start, double step, double tol,
                                 int max_iter) {
  gsl_set_error_handler_off();  // failures surface through return codes
  gsl_multimin_function fn{&lmm_objective, 4, const_cast<LmmProblem*>(&prob)};
  gsl_vector* x = gsl_vector_alloc(4);
  gsl_vector* ss = gsl_vector_alloc(4);
  for (std::size_t k = 0; k < 4; ++k) {
    gsl_vector_set(x, k, start[k]);
    gsl_vector_set(ss, k, step);
  }
  gsl_multimin_fminimizer* s = gsl_multimin_fminimizer_alloc(gsl_multimin_fminimizer_nmsimplex2, 4);
  gsl_multimin_fminimizer_set(s, &fn, x, ss);
  SimplexResult out;
  for (out.iterations = 1; out.iterations <= max_iter; ++out.iterations) {
    if (gsl_multimin_fminimizer_iterate(s) != GSL_SUCCESS) break;
    if (gsl_multimin_test_size(gsl_multimin_fminimizer_size(s), tol) == GSL_SUCCESS) {
      out.converged = true;
      break;
    }
  }
  for (std::size_t k = 0; k < 4; ++k) out.theta[k] = gsl_vector_get(s->x, k);
  out.value = s->fval;
  gsl_multimin_fminimizer_free(s);
  gsl_vector_free(ss);
  gsl_vector_free(x);
  return out;
}

}  // namespace detail

// Fits the mixed model by REML. theta is searched over all of R^4: the
// likelihood depends on theta only through theta_k^2, so the zero boundary is
// an interior point of the search space and the estimate is |theta|.
inline std::shared_ptr<MetaAnalysisModel> fit_ipd_meta(const MultiTrialDataset& data, const MetaOptions& opt = {}) {
  data.validate();
  const int p = data.p();
  if (opt.moderator_index < 1 || opt.moderator_index > p)
    throw DataError("moderator_index " + std::to_string(opt.moderator_index) + " outside [1, " + std::to_string(p) + "]");
  if (data.K() < 2) throw DataError("meta-analysis needs at least two trials");

  auto m = std::make_shared<MetaAnalysisModel>();
  m->moderator_index = opt.moderator_index;
  m->covariates = p;
  m->covariate_columns.push_back(opt.moderator_index - 1);
  for (int j = 0; j < p && m->covariate_columns.size() < 4; ++j)
    if (j != opt.moderator_index - 1) m->covariate_columns.push_back(j);
  m->fixed_names.push_back("(Intercept)");
  for (int c : m->covariate_columns) m->fixed_names.push_back(data.covariate_names[static_cast<std::size_t>(c)]);
  m->fixed_names.push_back("A");
  m->fixed_names.push_back(m->fixed_names[1] + ":A");

  const Index n = data.rows();
  const auto q = static_cast<Index>(m->fixed_names.size());
  if (n <= q) throw DataError("meta-analysis needs more rows than fixed effects");
  Matrix X(n, q);
  Matrix Z(n, 4);
  for (Index i = 0; i < n; ++i) {
    const double a = data.treatment[static_cast<std::size_t>(i)];
    const double x1 = data.covariates(i, m->covariate_columns[0]);
    X(i, 0) = 1.0;
    for (std::size_t k = 0; k < m->covariate_columns.size(); ++k)
      X(i, static_cast<Index>(k) + 1) = data.covariates(i, m->covariate_columns[k]);
    X(i, q - 2) = a;
    X(i, q - 1) = x1 * a;
    Z.row(i) << 1.0, x1, a, x1 * a;
  }
  const Vector& y = data.outcome;

  detail::LmmProblem prob;
  prob.n = n;
  prob.XtX = X.transpose() * X;
  prob.Xty = X.transpose() * y;
  prob.yty = y.squaredNorm();
  if (Eigen::FullPivLU<Matrix>(prob.XtX).rank() < q) throw DataError("meta-analysis: fixed-effect design is rank deficient");
  for (int id : data.trial_ids) {
    const auto rows = data.rows_of(id);
    const Matrix Xs = detail::select_rows(X, rows);
    const Matrix Zs = detail::select_rows(Z, rows);
    const Vector ys = detail::select_rows(y, rows);
    prob.groups.push_back({id, Zs.transpose() * Zs, Zs.transpose() * Xs, Zs.transpose() * ys});
  }

  // Restart from the best point until a restart stops improving.
  auto best = detail::run_simplex(prob, {1.0, 1.0, 1.0, 1.0}, 1.0, opt.tolerance, opt.max_iterations);
  int total = best.iterations;
  for (int r = 0; r < opt.max_restarts && best.converged; ++r) {
    auto again = detail::run_simplex(prob, best.theta, 0.1, opt.tolerance, opt.max_iterations);
    total += again.iterations;
    const bool improved = again.value < best.value - 1e-10 * (1.0 + std::fabs(best.value));
    if (again.value <= best.value) best = again;
    if (!improved) break;
  }
  if (!best.converged) {
    std::string msg = "meta-analysis: REML optimizer did not converge in " + std::to_string(opt.max_iterations) +
                      " iterations; best theta = (";
    for (std::size_t k = 0; k < 4; ++k) msg += (k ? ", " : "") + csv::format_double(std::fabs(best.theta[k]));
    throw NumericalError(msg + "), deviance " + csv::format_double(best.value));
  }
  for (auto& t : best.theta) t = std::fabs(t);
  // Scales below the optimizer's resolution are reported as the 0 boundary.
  for (auto& t : best.theta)
    if (t < 10.0 * opt.tolerance) t = 0.0;

  const auto sol = prob.solve(best.theta);
  m->fixed = sol.beta;
  m->fixed_se = (sol.sigma2 * sol.XtVX.inverse().diagonal()).cwiseSqrt();
  m->residual_variance = sol.sigma2;
  for (std::size_t k = 0; k < 4; ++k) m->random_variance[k] = sol.sigma2 * best.theta[k] * best.theta[k];
  m->reml_deviance = sol.deviance;
  m->iterations = total;

  // BLUPs: b_s = Lambda C_s^{-1} Lambda Z_s' (y_s - X_s beta).
  const Vector lam = Eigen::Map<const Vector>(best.theta.data(), 4);
  for (const auto& g : prob.groups) {
    Matrix C = lam.asDiagonal() * g.ZtZ * lam.asDiagonal();
    C.diagonal().array() += 1.0;
    const Vector rhs = lam.asDiagonal() * (g.Zty - g.ZtX * sol.beta);
    const Vector u = lam.asDiagonal() * Eigen::LLT<Matrix>(C).solve(rhs);
    m->random[g.id] = {u[0], u[1], u[2], u[3]};
  }
  return m;
}

inline std::shared_ptr<MetaAnalysisModel> fit_ipd_meta(const MultiTrialDataset& data, int moderator_index) {
  MetaOptions opt;
  opt.moderator_index = moderator_index;
  return fit_ipd_meta(data, opt);
}

}  // namespace mtcate
