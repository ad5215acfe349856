#pragma once

#include "mtcate/parallel.hpp"
#include "mtcate/rng.hpp"
#include "mtcate/tree.hpp"

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

namespace mtcate {

struct ForestParams {
  int n_trees = 500;
  int mtry = 0;  // 0 means ceil(p / 3)
  double bootstrap_fraction = 0.632;
  TreeParams tree_params{};
  std::uint64_t seed = 42;
  int threads = 1;

  int resolved_mtry(int p) const { return mtry > 0 ? mtry : std::max(1, (p + 2) / 3); }

  void validate(int p) const {
    if (n_trees < 1) throw DataError("n_trees must be >= 1");
    if (!(bootstrap_fraction > 0.0 && bootstrap_fraction <= 1.0))
      throw DataError("bootstrap_fraction must be in (0, 1]");
    if (mtry < 0) throw DataError("mtry must be >= 1");
    if (resolved_mtry(p) > p)
      throw DataError("mtry " + std::to_string(resolved_mtry(p)) + " exceeds feature count " + std::to_string(p));
    tree_params.validate();
  }
};

// Split tallies indexed [tree][feature][depth], depth 0 being the root split.
using SplitTally = std::vector<std::vector<std::vector<int>>>;

inline SplitTally tally_splits(std::span<const TreeModel> trees, int feature_count, int max_depth) {
  SplitTally out(trees.size(), std::vector<std::vector<int>>(static_cast<std::size_t>(feature_count),
                                                             std::vector<int>(static_cast<std::size_t>(max_depth), 0)));
  for (std::size_t t = 0; t < trees.size(); ++t)
    for (const auto& nd : trees[t].nodes)
      if (!nd.is_leaf() && nd.depth < max_depth) ++out[t][static_cast<std::size_t>(nd.feature)][static_cast<std::size_t>(nd.depth)];
  return out;
}

namespace detail {

inline int subsample_size(int n, double fraction) {
  return std::clamp(static_cast<int>(std::llround(fraction * n)), 1, n);
}

// Draws `k` distinct rows from `pool` (row positions). Selection happens in
// key space so the chosen set is a function of the stable keys only.
inline std::vector<int> draw_without_replacement(std::span<const int> pool, int k, std::mt19937_64& rng,
                                                 std::span<const int> keys) {
  std::vector<int> ids(pool.begin(), pool.end());
  if (!keys.empty()) {
    std::sort(ids.begin(), ids.end(), [&](int a, int b) { return keys[a] < keys[b]; });
  }
  const int n = static_cast<int>(ids.size());
  k = std::min(k, n);
  for (int i = 0; i < k; ++i) {
    std::uniform_int_distribution<int> pick(i, n - 1);
    std::swap(ids[i], ids[pick(rng)]);
  }
  ids.resize(static_cast<std::size_t>(k));
  return ids;
}

inline std::vector<int> iota_rows(Index n) {
  std::vector<int> rows(static_cast<std::size_t>(n));
  std::iota(rows.begin(), rows.end(), 0);
  return rows;
}

}  // namespace detail

namespace detail {

inline Vector average_trees(std::span<const TreeModel> trees, const Matrix& X) {
  Vector out(X.rows());
  std::vector<double> row(static_cast<std::size_t>(X.cols()));
  for (Index i = 0; i < X.rows(); ++i) {
    for (Index j = 0; j < X.cols(); ++j) row[static_cast<std::size_t>(j)] = X(i, j);
    double s = 0.0;
    for (const auto& t : trees) s += t.predict_row(row);
    out[i] = s / static_cast<double>(trees.size());
  }
  return out;
}

// Out-of-bag average for the training matrix; rows that were in every tree's
// subsample fall back to the full-ensemble prediction.
inline Vector oob_average(std::span<const TreeModel> trees, const std::vector<std::vector<int>>& inbag,
                          const Matrix& X) {
  if (inbag.size() != trees.size()) throw DataError("out-of-bag prediction needs in-bag records");
  const Index n = X.rows();
  Vector sum = Vector::Zero(n);
  Eigen::VectorXi count = Eigen::VectorXi::Zero(n);
  std::vector<char> in(static_cast<std::size_t>(n));
  std::vector<double> row(static_cast<std::size_t>(X.cols()));
  for (std::size_t t = 0; t < trees.size(); ++t) {
    std::fill(in.begin(), in.end(), 0);
    for (int r : inbag[t])
      if (r < n) in[static_cast<std::size_t>(r)] = 1;
    for (Index i = 0; i < n; ++i) {
      if (in[static_cast<std::size_t>(i)]) continue;
      for (Index j = 0; j < X.cols(); ++j) row[static_cast<std::size_t>(j)] = X(i, j);
      sum[i] += trees[t].predict_row(row);
      ++count[i];
    }
  }
  const Vector full = average_trees(trees, X);
  Vector out(n);
  for (Index i = 0; i < n; ++i) out[i] = count[i] > 0 ? sum[i] / count[i] : full[i];
  return out;
}

}  // namespace detail

class ForestModel {
 public:
  std::vector<TreeModel> trees;
  ForestParams params;
  int feature_count = 0;
  // Training rows used by each tree; empty for deserialized models.
  std::vector<std::vector<int>> inbag;

  double predict_row(std::span<const double> x) const {
    double s = 0.0;
    for (const auto& t : trees) s += t.predict_row(x);
    return s / static_cast<double>(trees.size());
  }

  Vector predict(const Matrix& X) const {
    check_width(X);
    return detail::average_trees(trees, X);
  }

  Vector predict_oob(const Matrix& X) const {
    check_width(X);
    return detail::oob_average(trees, inbag, X);
  }

  SplitTally split_counts(int max_depth) const { return tally_splits(trees, feature_count, max_depth); }

  void check_width(const Matrix& X) const {
    if (X.cols() != feature_count)
      throw DataError("forest expects " + std::to_string(feature_count) + " features, got " +
                      std::to_string(X.cols()));
  }
};

// Random regression forest: each tree is grown on a without-replacement
// subsample with `mtry` candidate features per split. Tree t draws from the
// stream (seed, t), so results do not depend on `threads`.
// `row_keys`, when given, is a permutation of [0, n) naming each row's stable
// identity; subsamples and tie-breaks are keyed on it.
inline ForestModel fit_regression_forest(const Matrix& X, const Vector& y, const ForestParams& params = {},
                                         std::span<const int> row_keys = {}) {
  detail::check_xy(X, y);
  const int p = static_cast<int>(X.cols());
  params.validate(p);
  if (!row_keys.empty() && static_cast<Index>(row_keys.size()) != X.rows())
    throw DataError("row_keys length must match the row count");
  ForestModel model;
  model.params = params;
  model.feature_count = p;
  model.trees.resize(static_cast<std::size_t>(params.n_trees));
  model.inbag.resize(static_cast<std::size_t>(params.n_trees));
  const int n = static_cast<int>(X.rows());
  const int k = detail::subsample_size(n, params.bootstrap_fraction);
  const int mtry = params.resolved_mtry(p);
  const auto all_rows = detail::iota_rows(n);
  const detail::PresortedColumns presorted(X, row_keys);
  parallel_for(static_cast<std::size_t>(params.n_trees), params.threads, [&](std::size_t t) {
    auto rng = make_rng(params.seed, {t, hash_tag("regression-tree")});
    auto rows = k == n ? all_rows : detail::draw_without_replacement(all_rows, k, rng, row_keys);
    detail::RegressionCriterion crit(y);
    detail::TreeGrower<detail::RegressionCriterion> grower(X, crit, params.tree_params, mtry, &rng, row_keys,
                                                           &presorted);
    model.trees[t] = grower.grow(rows);
    model.inbag[t] = std::move(rows);
  });
  return model;
}

}  // namespace mtcate
