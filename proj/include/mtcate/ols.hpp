#pragma once

#include "mtcate/types.hpp"

#include <boost/math/distributions/students_t.hpp>

#include <cmath>
#include <limits>
#include <string>
#include <vector>

namespace mtcate {

enum class RobustSE { none, hc0, hc1, hc3 };

struct CoefRow {
  std::string name;
  double estimate = 0.0;
  double std_error = 0.0;
  double t_value = 0.0;
  double p_value = 1.0;
};

struct CoefTable {
  std::vector<CoefRow> rows;
  double residual_variance = 0.0;
  int df_residual = 0;
  RobustSE robust = RobustSE::none;

  const CoefRow& at(const std::string& name) const {
    for (const auto& r : rows)
      if (r.name == name) return r;
    throw DataError("no coefficient named '" + name + "'");
  }
};

struct OlsOptions {
  bool intercept = true;
  std::vector<std::string> names;  // one per column of X; defaults to x1..xp
  RobustSE robust = RobustSE::none;
};

namespace detail {

inline double two_sided_p(double t, int df) {
  if (std::isnan(t)) return 1.0;
  if (std::isinf(t)) return 0.0;
  if (df <= 0) return std::numeric_limits<double>::quiet_NaN();
  boost::math::students_t dist(static_cast<double>(df));
  return 2.0 * boost::math::cdf(boost::math::complement(dist, std::fabs(t)));
}

}  // namespace detail

// Least squares through a column-pivoted QR. Rank deficiency is an error that
// names the columns the pivoting left out.
inline CoefTable fit_ols(const Matrix& X, const Vector& y, const OlsOptions& opt = {}) {
  if (X.rows() != y.size()) throw DataError("fit_ols: row count mismatch");
  if (!X.allFinite() || !y.allFinite()) throw DataError("fit_ols: non-finite input");
  const Index n = X.rows();
  const Index k = X.cols() + (opt.intercept ? 1 : 0);
  if (k == 0) throw DataError("fit_ols: empty design");
  std::vector<std::string> names;
  if (opt.intercept) names.emplace_back("(Intercept)");
  for (Index j = 0; j < X.cols(); ++j)
    names.push_back(j < static_cast<Index>(opt.names.size()) ? opt.names[static_cast<std::size_t>(j)]
                                                             : "x" + std::to_string(j + 1));
  Matrix D(n, k);
  if (opt.intercept) D.col(0).setOnes();
  D.rightCols(X.cols()) = X;
  if (n < k) throw NumericalError("fit_ols: more coefficients (" + std::to_string(k) + ") than rows");

  Eigen::ColPivHouseholderQR<Matrix> qr(D);
  qr.setThreshold(1e-10);
  qr.compute(D);
  if (qr.rank() < k) {
    // Columns carrying weight in some null-space direction are the collinear ones.
    Eigen::JacobiSVD<Matrix> svd(D, Eigen::ComputeFullV);
    const Vector& sv = svd.singularValues();
    std::string bad;
    for (Index j = 0; j < k; ++j) {
      bool involved = false;
      for (Index c = 0; c < k; ++c)
        if ((c >= sv.size() || sv[c] <= 1e-10 * sv[0]) && std::abs(svd.matrixV()(j, c)) > 1e-8) involved = true;
      if (involved) bad += (bad.empty() ? "" : ", ") + names[static_cast<std::size_t>(j)];
    }
    throw DataError("fit_ols: rank-deficient design; collinear columns: " + bad);
  }
  const Vector beta = qr.solve(y);
  const Vector resid = y - D * beta;
  const int df = static_cast<int>(n - k);

  // (D'D)^-1 = P R^-1 R^-T P'
  const Matrix R = qr.matrixR().topLeftCorner(k, k).template triangularView<Eigen::Upper>();
  const Matrix Rinv = R.template triangularView<Eigen::Upper>().solve(Matrix::Identity(k, k));
  Matrix xtx_inv_p = Rinv * Rinv.transpose();
  Matrix xtx_inv(k, k);
  const auto& perm = qr.colsPermutation().indices();
  for (Index a = 0; a < k; ++a)
    for (Index b = 0; b < k; ++b) xtx_inv(perm[a], perm[b]) = xtx_inv_p(a, b);

  CoefTable table;
  table.df_residual = df;
  table.robust = opt.robust;
  table.residual_variance = df > 0 ? resid.squaredNorm() / df : std::numeric_limits<double>::quiet_NaN();

  Matrix cov;
  if (opt.robust == RobustSE::none) {
    cov = xtx_inv * table.residual_variance;
  } else {
    Matrix meat = Matrix::Zero(k, k);
    for (Index i = 0; i < n; ++i) {
      const Vector xi = D.row(i).transpose();
      double w = resid[i] * resid[i];
      if (opt.robust == RobustSE::hc1) {
        w *= static_cast<double>(n) / std::max<Index>(n - k, 1);
      } else if (opt.robust == RobustSE::hc3) {
        const double h = xi.dot(xtx_inv * xi);
        const double denom = std::max(1.0 - h, 1e-12);
        w /= denom * denom;
      }
      meat.noalias() += w * xi * xi.transpose();
    }
    cov = xtx_inv * meat * xtx_inv;
  }

  for (Index j = 0; j < k; ++j) {
    CoefRow row;
    row.name = names[static_cast<std::size_t>(j)];
    row.estimate = beta[j];
    row.std_error = std::sqrt(std::max(cov(j, j), 0.0));
    if (row.std_error > 0.0) {
      row.t_value = row.estimate / row.std_error;
    } else {
      row.t_value = row.estimate == 0.0 ? std::numeric_limits<double>::quiet_NaN()
                                        : std::copysign(std::numeric_limits<double>::infinity(), row.estimate);
    }
    row.p_value = detail::two_sided_p(row.t_value, df);
    table.rows.push_back(std::move(row));
  }
  return table;
}

}  // namespace mtcate
