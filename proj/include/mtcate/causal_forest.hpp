#pragma once

#include "mtcate/cate.hpp"

#include <cmath>
#include <memory>
#include <span>
#include <vector>

namespace mtcate {

struct CausalForestParams {
  ForestParams forest{};
  bool honesty = false;
  // >= 2 enables grouped half-sampling: trees in a group subsample from one
  // shared half of the data, which is what the variance estimate needs.
  int ci_groups = 0;
};

namespace detail {

// Treatment-effect contrast criterion: for children L, R with
// difference-in-means effects tL, tR, maximize nL nR / n^2 (tL - tR)^2.
// Each child must keep min_node_size rows in each arm.
class CausalCriterion {
 public:
  struct Acc {
    int n1 = 0, n0 = 0;
    double s1 = 0.0, s0 = 0.0;
  };

  CausalCriterion(const Vector& y, const std::vector<int>& treat) : y_(y), treat_(treat) {}

  void begin_node(std::span<const int> rows) {
    double s1 = 0.0, s0 = 0.0;
    int n1 = 0, n0 = 0;
    for (int r : rows) {
      if (treat_[static_cast<std::size_t>(r)]) {
        s1 += y_[r];
        ++n1;
      } else {
        s0 += y_[r];
        ++n0;
      }
    }
    c1_ = n1 > 0 ? s1 / n1 : 0.0;
    c0_ = n0 > 0 ? s0 / n0 : 0.0;
  }

  bool node_splittable(std::span<const int> rows, const TreeParams& p) const {
    int n1 = 0;
    for (int r : rows) n1 += treat_[static_cast<std::size_t>(r)];
    const int n0 = static_cast<int>(rows.size()) - n1;
    return n1 >= 2 * p.min_node_size && n0 >= 2 * p.min_node_size;
  }

  Acc total(std::span<const int> rows) const {
    Acc a;
    for (int r : rows) add(a, r);
    return a;
  }

  void add(Acc& a, int row) const {
    if (treat_[static_cast<std::size_t>(row)]) {
      ++a.n1;
      a.s1 += y_[row] - c1_;
    } else {
      ++a.n0;
      a.s0 += y_[row] - c0_;
    }
  }

  double gain(const Acc& l, const Acc& t, const TreeParams& p) const {
    const int r1 = t.n1 - l.n1;
    const int r0 = t.n0 - l.n0;
    const int m = p.min_node_size;
    if (l.n1 < m || l.n0 < m || r1 < m || r0 < m) return -1.0;
    const double tl = l.s1 / l.n1 - l.s0 / l.n0;
    const double tr = (t.s1 - l.s1) / r1 - (t.s0 - l.s0) / r0;
    const double nl = l.n1 + l.n0;
    const double nr = r1 + r0;
    const double n = nl + nr;
    return nl * nr / (n * n) * (tl - tr) * (tl - tr);
  }

  void fill_leaf(TreeNode& leaf, std::span<const int> rows) const {
    double s1 = 0.0, s0 = 0.0;
    int n1 = 0, n0 = 0;
    for (int r : rows) {
      if (treat_[static_cast<std::size_t>(r)]) {
        s1 += y_[r];
        ++n1;
      } else {
        s0 += y_[r];
        ++n0;
      }
    }
    leaf.n_treated = n1;
    leaf.n_control = n0;
    leaf.value = (n1 > 0 && n0 > 0) ? s1 / n1 - s0 / n0 : 0.0;
  }

 private:
  const Vector& y_;
  const std::vector<int>& treat_;
  double c1_ = 0.0, c0_ = 0.0;
};

// Recomputes every node's effect from the estimation rows. A node missing an
// arm inherits its parent's effect.
inline void honest_reestimate(TreeModel& tree, const Matrix& X, const Vector& y, const std::vector<int>& treat,
                              std::span<const int> est_rows) {
  const std::size_t m = tree.nodes.size();
  std::vector<double> s1(m, 0.0), s0(m, 0.0);
  std::vector<int> n1(m, 0), n0(m, 0), parent(m, -1);
  for (std::size_t k = 0; k < m; ++k)
    if (!tree.nodes[k].is_leaf()) {
      parent[static_cast<std::size_t>(tree.nodes[k].left)] = static_cast<int>(k);
      parent[static_cast<std::size_t>(tree.nodes[k].right)] = static_cast<int>(k);
    }
  for (int r : est_rows) {
    int k = 0;
    const bool treated = treat[static_cast<std::size_t>(r)] != 0;
    while (true) {
      auto& slot = treated ? s1 : s0;
      slot[static_cast<std::size_t>(k)] += y[r];
      ++(treated ? n1 : n0)[static_cast<std::size_t>(k)];
      const auto& nd = tree.nodes[static_cast<std::size_t>(k)];
      if (nd.is_leaf()) break;
      k = nd.left + static_cast<int>(!(X(r, nd.feature) <= nd.threshold));
    }
  }
  for (std::size_t k = 0; k < m; ++k) {
    auto& nd = tree.nodes[k];
    nd.n_treated = n1[k];
    nd.n_control = n0[k];
    if (n1[k] > 0 && n0[k] > 0) {
      nd.value = s1[k] / n1[k] - s0[k] / n0[k];
    } else if (parent[k] >= 0) {
      nd.value = tree.nodes[static_cast<std::size_t>(parent[k])].value;
    }
  }
}

}  // namespace detail

class CausalForestModel final : public CateModel {
 public:
  std::vector<TreeModel> trees;
  CausalForestParams params;
  int features = 0;
  std::vector<std::vector<int>> inbag;  // empty for deserialized models

  CateKind kind() const override { return CateKind::causal_forest; }
  int feature_count() const override { return features; }

  double predict_one(std::span<const double> x, std::optional<int>) const override {
    double s = 0.0;
    for (const auto& t : trees) s += t.predict_row(x);
    return s / static_cast<double>(trees.size());
  }

  Vector predict(const Matrix& X, std::span<const int> trials = {}) const override {
    check_input(X, trials);
    return detail::average_trees(trees, X);
  }

  Vector predict_oob(const Matrix& X) const {
    check_input(X, {});
    return detail::oob_average(trees, inbag, X);
  }

  SplitTally split_counts(int max_depth) const { return tally_splits(trees, features, max_depth); }

  Json to_json() const override {
    return {{"kind", "causal_forest"},
            {"feature_count", features},
            {"honesty", params.honesty},
            {"ci_groups", params.ci_groups},
            {"params", json_io::forest_params_to_json(params.forest)},
            {"trees", json_io::trees_to_json(trees)}};
  }

  static std::shared_ptr<CausalForestModel> from_json(const Json& j) {
    auto m = std::make_shared<CausalForestModel>();
    m->features = j.at("feature_count").get<int>();
    m->params.honesty = j.at("honesty").get<bool>();
    m->params.ci_groups = j.at("ci_groups").get<int>();
    m->params.forest = json_io::forest_params_from_json(j.at("params"));
    m->trees = json_io::trees_from_json(j.at("trees"));
    if (m->trees.empty()) throw DataError("causal forest JSON has no trees");
    return m;
  }
};

// Causal forest of difference-in-means trees. With honesty, each tree's
// subsample is halved: one half chooses splits, the other estimates leaf
// effects.
inline std::shared_ptr<CausalForestModel> fit_causal_forest(const StudyData& data, const CausalForestParams& cp = {}) {
  data.check();
  const ForestParams& params = cp.forest;
  const int p = static_cast<int>(data.X.cols());
  params.validate(p);
  detail::check_xy(data.X, data.y);
  const auto [n_treated, n_control] = data.arm_counts();
  if (n_treated == 0 || n_control == 0) throw DataError("causal forest needs both treatment arms");
  const int groups = cp.ci_groups;
  if (groups >= 2 && params.n_trees % groups != 0)
    throw DataError("n_trees (" + std::to_string(params.n_trees) + ") must be divisible by ci_groups (" +
                    std::to_string(groups) + ")");
  if (groups >= 2 && params.n_trees < 2 * groups) throw DataError("ci_groups needs at least two trees per group");

  const int n = static_cast<int>(data.rows());
  const int mtry = params.resolved_mtry(p);
  const auto all_rows = detail::iota_rows(n);
  const detail::PresortedColumns presorted(data.X, {});

  // Half-samples shared by each CI group.
  std::vector<std::vector<int>> halves;
  if (groups >= 2) {
    for (int g = 0; g < groups; ++g) {
      auto rng = make_rng(params.seed, {static_cast<std::uint64_t>(g), hash_tag("ci-half-sample")});
      halves.push_back(detail::draw_without_replacement(all_rows, n / 2, rng, {}));
    }
  }
  const int trees_per_group = groups >= 2 ? params.n_trees / groups : params.n_trees;

  auto m = std::make_shared<CausalForestModel>();
  m->params = cp;
  m->features = p;
  m->trees.resize(static_cast<std::size_t>(params.n_trees));
  m->inbag.resize(static_cast<std::size_t>(params.n_trees));
  parallel_for(static_cast<std::size_t>(params.n_trees), params.threads, [&](std::size_t t) {
    auto rng = make_rng(params.seed, {t, hash_tag("causal-tree")});
    const auto& pool = groups >= 2 ? halves[t / static_cast<std::size_t>(trees_per_group)] : all_rows;
    const int k = detail::subsample_size(static_cast<int>(pool.size()), params.bootstrap_fraction);
    auto rows = k == n ? all_rows : detail::draw_without_replacement(pool, k, rng, {});
    std::vector<int> structure = rows;
    std::vector<int> estimation;
    if (cp.honesty) {
      std::shuffle(structure.begin(), structure.end(), rng);
      const auto half = structure.size() / 2;
      estimation.assign(structure.begin() + static_cast<std::ptrdiff_t>(half), structure.end());
      structure.resize(half);
      for (const auto* part : {&structure, &estimation}) {
        int treated = 0;
        for (int r : *part) treated += data.treat[static_cast<std::size_t>(r)];
        if (treated == 0 || treated == static_cast<int>(part->size()))
          throw DataError("honest causal forest: a subsample half lacks one treatment arm");
      }
    }
    detail::CausalCriterion crit(data.y, data.treat);
    detail::TreeGrower<detail::CausalCriterion> grower(data.X, crit, params.tree_params, mtry, &rng, {}, &presorted);
    auto tree = grower.grow(structure);
    if (cp.honesty) detail::honest_reestimate(tree, data.X, data.y, data.treat, estimation);
    m->trees[t] = std::move(tree);
    m->inbag[t] = std::move(rows);
  });
  return m;
}

struct CateIntervals {
  Vector estimate;
  Vector variance;
  Vector lower;
  Vector upper;
};

// Grouped-tree variance. Trees are split into the forest's CI groups; the
// mean squared deviation of group means from the forest mean, minus the
// Monte Carlo noise of a group mean, estimates the sampling variance
// (floored at 0). Intervals are estimate +/- 1.96 sd.
inline CateIntervals estimate_cate_variance(const CausalForestModel& model, const Matrix& X) {
  const int groups = model.params.ci_groups;
  const auto n_trees = static_cast<int>(model.trees.size());
  if (groups < 2 || n_trees < 2 * groups || n_trees % groups != 0)
    throw DataError("variance estimation needs a forest fitted with ci_groups >= 2 dividing n_trees (got ci_groups=" +
                    std::to_string(groups) + ", n_trees=" + std::to_string(n_trees) + ")");
  if (X.cols() != model.features) throw DataError("variance: covariate count mismatch");
  const int per = n_trees / groups;
  CateIntervals out;
  const Index n = X.rows();
  out.estimate.resize(n);
  out.variance.resize(n);
  out.lower.resize(n);
  out.upper.resize(n);
  std::vector<double> row(static_cast<std::size_t>(X.cols()));
  std::vector<double> preds(static_cast<std::size_t>(n_trees));
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < X.cols(); ++j) row[static_cast<std::size_t>(j)] = X(i, j);
    double mean = 0.0;
    for (int t = 0; t < n_trees; ++t) {
      preds[static_cast<std::size_t>(t)] = model.trees[static_cast<std::size_t>(t)].predict_row(row);
      mean += preds[static_cast<std::size_t>(t)];
    }
    mean /= n_trees;
    double between = 0.0, total = 0.0;
    for (int g = 0; g < groups; ++g) {
      double gm = 0.0;
      for (int t = g * per; t < (g + 1) * per; ++t) {
        gm += preds[static_cast<std::size_t>(t)];
        total += (preds[static_cast<std::size_t>(t)] - mean) * (preds[static_cast<std::size_t>(t)] - mean);
      }
      gm /= per;
      between += (gm - mean) * (gm - mean);
    }
    between /= groups;
    total /= n_trees;
    const double noise = (total - between) / (per - 1);
    const double var = std::max(between - noise, 0.0);
    out.estimate[i] = mean;
    out.variance[i] = var;
    out.lower[i] = mean - 1.96 * std::sqrt(var);
    out.upper[i] = mean + 1.96 * std::sqrt(var);
  }
  return out;
}

}  // namespace mtcate
