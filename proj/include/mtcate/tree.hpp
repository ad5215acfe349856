#pragma once

#include "mtcate/types.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace mtcate {

inline constexpr int kUnlimitedDepth = std::numeric_limits<int>::max();

struct TreeParams {
  int max_depth = kUnlimitedDepth;
  int min_node_size = 5;
  double min_split_gain = 0.0;

  void validate() const {
    if (max_depth < 0) throw DataError("max_depth must be >= 0");
    if (min_node_size < 1) throw DataError("min_node_size must be >= 1");
    if (!(min_split_gain >= 0.0)) throw DataError("min_split_gain must be >= 0");
  }
};

struct TreeNode {
  int feature = -1;  // -1 marks a leaf
  double threshold = 0.0;
  int left = -1;
  int right = -1;
  double value = 0.0;
  int depth = 0;
  // Estimation-sample arm counts; only populated by causal trees.
  int n_treated = 0;
  int n_control = 0;

  bool is_leaf() const { return feature < 0; }
};

// Binary tree stored in preorder with siblings adjacent (right == left + 1).
// Rows with x[feature] <= threshold go left.
class TreeModel {
 public:
  std::vector<TreeNode> nodes;
  int feature_count = 0;

  template <class Get>
  int leaf_index(Get&& get) const {
    int k = 0;
    while (!nodes[k].is_leaf()) {
      const auto& nd = nodes[k];
      k = nd.left + static_cast<int>(!(get(nd.feature) <= nd.threshold));
    }
    return k;
  }

  double predict_row(std::span<const double> x) const {
    return nodes[leaf_index([&](int j) { return x[j]; })].value;
  }

  double predict_row(const Matrix& X, Index i) const {
    return nodes[leaf_index([&](int j) { return X(i, j); })].value;
  }

  Vector predict(const Matrix& X) const {
    check_width(X);
    Vector out(X.rows());
    std::vector<double> row(static_cast<std::size_t>(X.cols()));
    for (Index i = 0; i < X.rows(); ++i) {
      for (Index j = 0; j < X.cols(); ++j) row[static_cast<std::size_t>(j)] = X(i, j);
      out[i] = predict_row(row);
    }
    return out;
  }

  int leaf_count() const {
    return static_cast<int>(std::count_if(nodes.begin(), nodes.end(), [](const TreeNode& n) { return n.is_leaf(); }));
  }

  int split_count() const { return static_cast<int>(nodes.size()) - leaf_count(); }

  void check_width(const Matrix& X) const {
    if (X.cols() != feature_count)
      throw DataError("tree expects " + std::to_string(feature_count) + " features, got " +
                      std::to_string(X.cols()));
  }

  // Throws if the structural invariants do not hold.
  void validate() const {
    if (nodes.empty()) throw DataError("tree has no nodes");
    for (std::size_t k = 0; k < nodes.size(); ++k) {
      const auto& nd = nodes[k];
      if (!std::isfinite(nd.value)) throw DataError("tree node value not finite");
      if (nd.is_leaf()) continue;
      const int n = static_cast<int>(nodes.size());
      if (nd.feature >= feature_count || nd.left <= static_cast<int>(k) || nd.right != nd.left + 1 ||
          nd.right >= n || !std::isfinite(nd.threshold))
        throw DataError("malformed tree node " + std::to_string(k));
    }
  }
};

namespace detail {

// Sum-of-squares reduction on values centered at the node mean, so a
// constant response yields exactly zero gain.
class RegressionCriterion {
 public:
  struct Acc {
    int n = 0;
    double sum = 0.0;
  };

  explicit RegressionCriterion(const Vector& y) : y_(y) {}

  void begin_node(std::span<const int> rows) {
    double s = 0.0;
    for (int r : rows) s += y_[r];
    center_ = s / static_cast<double>(rows.size());
  }

  bool node_splittable(std::span<const int> rows, const TreeParams& p) const {
    return rows.size() >= 2 && static_cast<int>(rows.size()) >= p.min_node_size;
  }

  Acc total(std::span<const int> rows) const {
    Acc a;
    for (int r : rows) add(a, r);
    return a;
  }

  void add(Acc& a, int row) const {
    ++a.n;
    a.sum += y_[row] - center_;
  }

  // Negative return value means the split is inadmissible.
  double gain(const Acc& left, const Acc& tot, const TreeParams&) const {
    const int nr = tot.n - left.n;
    if (left.n == 0 || nr == 0) return -1.0;
    const double sr = tot.sum - left.sum;
    return left.sum * left.sum / left.n + sr * sr / nr - tot.sum * tot.sum / tot.n;
  }

  void fill_leaf(TreeNode& leaf, std::span<const int> rows) const {
    double s = 0.0;
    for (int r : rows) s += y_[r];
    leaf.value = s / static_cast<double>(rows.size());
  }

 private:
  const Vector& y_;
  double center_ = 0.0;
};

struct SplitChoice {
  int feature = -1;
  double threshold = 0.0;
  double gain = 0.0;
};

// Per-feature row orders sorted by (value, key). Built once and shared by
// every tree of a forest; each tree filters it down to its own rows.
struct PresortedColumns {
  std::vector<std::vector<int>> order;

  PresortedColumns(const Matrix& X, std::span<const int> keys) {
    const Index n = X.rows();
    order.resize(static_cast<std::size_t>(X.cols()));
    auto key = [&](int r) { return keys.empty() ? r : keys[r]; };
    for (Index f = 0; f < X.cols(); ++f) {
      auto& o = order[static_cast<std::size_t>(f)];
      o.resize(static_cast<std::size_t>(n));
      std::iota(o.begin(), o.end(), 0);
      std::sort(o.begin(), o.end(), [&](int a, int b) {
        const double va = X(a, f), vb = X(b, f);
        return va < vb || (va == vb && key(a) < key(b));
      });
    }
  }
};

// Greedy depth-first tree growth over a row subset. `keys` gives each row a
// stable identity used to break value ties, so the grown tree depends only on
// (value, key) pairs and not on row order.
template <class Criterion>
class TreeGrower {
 public:
  TreeGrower(const Matrix& X, Criterion& crit, const TreeParams& params, int mtry, std::mt19937_64* rng,
             std::span<const int> keys, const PresortedColumns* presorted = nullptr)
      : X_(X), crit_(crit), params_(params), mtry_(mtry), rng_(rng), keys_(keys), presorted_(presorted) {
    features_.resize(static_cast<std::size_t>(X.cols()));
    std::iota(features_.begin(), features_.end(), 0);
  }

  TreeModel grow(const std::vector<int>& rows) {
    build_orders(rows);
    TreeModel tree;
    tree.feature_count = static_cast<int>(X_.cols());
    struct Pending {
      int node, begin, end;
    };
    std::vector<Pending> stack;
    tree.nodes.emplace_back();
    stack.push_back({0, 0, static_cast<int>(rows.size())});
    while (!stack.empty()) {
      const Pending cur = stack.back();
      stack.pop_back();
      std::span<const int> span(by_key_.data() + cur.begin, static_cast<std::size_t>(cur.end - cur.begin));
      const int depth = tree.nodes[cur.node].depth;
      SplitChoice best;
      if (depth < params_.max_depth && crit_.node_splittable(span, params_)) best = find_split(cur.begin, cur.end);
      // Internal nodes also carry a value (used as a fallback by honest trees).
      crit_.fill_leaf(tree.nodes[cur.node], span);
      if (best.feature < 0) continue;
      const int split_at = partition(cur.begin, cur.end, best);
      const int left = static_cast<int>(tree.nodes.size());
      tree.nodes.emplace_back();
      tree.nodes.emplace_back();
      auto& nd = tree.nodes[cur.node];
      nd.feature = best.feature;
      nd.threshold = best.threshold;
      nd.left = left;
      nd.right = left + 1;
      tree.nodes[left].depth = depth + 1;
      tree.nodes[left + 1].depth = depth + 1;
      // Right pushed first so the left subtree is laid out first.
      stack.push_back({left + 1, split_at, cur.end});
      stack.push_back({left, cur.begin, split_at});
    }
    return tree;
  }

 private:
  int key(int row) const { return keys_.empty() ? row : keys_[row]; }

  void build_orders(const std::vector<int>& rows) {
    const auto p = static_cast<std::size_t>(X_.cols());
    side_.assign(static_cast<std::size_t>(X_.rows()), 0);
    by_key_ = rows;
    std::sort(by_key_.begin(), by_key_.end(), [&](int a, int b) { return key(a) < key(b); });
    order_.assign(p, {});
    if (presorted_ != nullptr) {
      for (int r : rows) side_[static_cast<std::size_t>(r)] = 1;
      for (std::size_t f = 0; f < p; ++f) {
        auto& o = order_[f];
        o.reserve(rows.size());
        for (int r : presorted_->order[f])
          if (side_[static_cast<std::size_t>(r)]) o.push_back(r);
      }
      for (int r : rows) side_[static_cast<std::size_t>(r)] = 0;
    } else {
      for (std::size_t f = 0; f < p; ++f) {
        auto& o = order_[f];
        o = by_key_;
        const auto fi = static_cast<Index>(f);
        std::stable_sort(o.begin(), o.end(), [&](int a, int b) { return X_(a, fi) < X_(b, fi); });
      }
    }
    buffer_.resize(rows.size());
  }

  int partition(int begin, int end, const SplitChoice& s) {
    int n_left = 0;
    for (int i = begin; i < end; ++i) {
      const int r = by_key_[static_cast<std::size_t>(i)];
      const bool left = X_(r, s.feature) <= s.threshold;
      side_[static_cast<std::size_t>(r)] = left ? 1 : 0;
      n_left += left;
    }
    auto stable_split = [&](std::vector<int>& v) {
      int li = begin, ri = 0;
      for (int i = begin; i < end; ++i) {
        const int r = v[static_cast<std::size_t>(i)];
        if (side_[static_cast<std::size_t>(r)]) v[static_cast<std::size_t>(li++)] = r;
        else buffer_[static_cast<std::size_t>(ri++)] = r;
      }
      std::copy(buffer_.begin(), buffer_.begin() + ri, v.begin() + li);
    };
    stable_split(by_key_);
    for (auto& o : order_) stable_split(o);
    return begin + n_left;
  }

  SplitChoice find_split(int begin, int end) {
    std::span<const int> rows(by_key_.data() + begin, static_cast<std::size_t>(end - begin));
    crit_.begin_node(rows);
    const auto total = crit_.total(rows);
    const int p = static_cast<int>(features_.size());
    int m = p;
    if (rng_ != nullptr && mtry_ < p) {
      m = mtry_;
      for (int i = 0; i < m; ++i) {
        std::uniform_int_distribution<int> pick(i, p - 1);
        std::swap(features_[i], features_[pick(*rng_)]);
      }
      std::sort(features_.begin(), features_.begin() + m);
    }
    SplitChoice best;
    best.gain = std::max(params_.min_split_gain, 0.0);
    for (int fi = 0; fi < m; ++fi) {
      const int f = features_[fi];
      const int* ord = order_[static_cast<std::size_t>(f)].data();
      if (X_(ord[begin], f) == X_(ord[end - 1], f)) continue;
      typename Criterion::Acc left;
      double lo = X_(ord[begin], f);
      for (int i = begin; i + 1 < end; ++i) {
        crit_.add(left, ord[i]);
        const double hi = X_(ord[i + 1], f);
        if (lo != hi) {
          const double g = crit_.gain(left, total, params_);
          // Relative slack so rounding cannot break a tie between equal partitions.
          if (g > best.gain + 1e-12 * best.gain) {
            double thr = lo + (hi - lo) / 2.0;
            if (!(thr < hi)) thr = lo;
            best = {f, thr, g};
          }
        }
        lo = hi;
      }
    }
    if (rng_ != nullptr && mtry_ < p) std::sort(features_.begin(), features_.end());
    return best;
  }

  const Matrix& X_;
  Criterion& crit_;
  const TreeParams& params_;
  int mtry_;
  std::mt19937_64* rng_;
  std::span<const int> keys_;
  const PresortedColumns* presorted_;
  std::vector<int> by_key_;
  std::vector<std::vector<int>> order_;
  std::vector<int> buffer_;
  std::vector<char> side_;
  std::vector<int> features_;
};

inline void check_xy(const Matrix& X, const Vector& y) {
  if (X.rows() == 0 || y.size() == 0) throw DataError("empty training input");
  if (X.rows() != y.size())
    throw DataError("row count mismatch: X has " + std::to_string(X.rows()) + " rows, y has " +
                    std::to_string(y.size()));
  if (!X.allFinite() || !y.allFinite()) throw DataError("training input contains non-finite values");
}

}  // namespace detail

// CART regression tree: greedy best split minimizing within-node squared
// error, evaluated over every feature. Ties go to the lowest feature index,
// then the lowest threshold.
inline TreeModel fit_regression_tree(const Matrix& X, const Vector& y, const TreeParams& params = {}) {
  detail::check_xy(X, y);
  params.validate();
  detail::RegressionCriterion crit(y);
  std::vector<int> rows(static_cast<std::size_t>(X.rows()));
  std::iota(rows.begin(), rows.end(), 0);
  detail::TreeGrower<detail::RegressionCriterion> grower(X, crit, params, static_cast<int>(X.cols()), nullptr, {});
  return grower.grow(rows);
}

}  // namespace mtcate
