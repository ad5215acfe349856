#pragma once

#include "mtcate/forest.hpp"
#include "mtcate/lasso.hpp"
#include "mtcate/tree.hpp"

#include <nlohmann/json.hpp>

#include <vector>

namespace mtcate {

using Json = nlohmann::json;

namespace json_io {

inline Json vector_to_json(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

inline Vector vector_from_json(const Json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Vector>(v.data(), static_cast<Index>(v.size()));
}

// Nodes as rows [feature, threshold, left, right, value, depth, n_treated, n_control].
inline Json tree_to_json(const TreeModel& t) {
  Json nodes = Json::array();
  for (const auto& n : t.nodes)
    nodes.push_back(Json::array({n.feature, n.threshold, n.left, n.right, n.value, n.depth, n.n_treated, n.n_control}));
  return {{"feature_count", t.feature_count}, {"nodes", std::move(nodes)}};
}

inline TreeModel tree_from_json(const Json& j) {
  TreeModel t;
  t.feature_count = j.at("feature_count").get<int>();
  for (const auto& a : j.at("nodes")) {
    TreeNode n;
    n.feature = a.at(0).get<int>();
    n.threshold = a.at(1).get<double>();
    n.left = a.at(2).get<int>();
    n.right = a.at(3).get<int>();
    n.value = a.at(4).get<double>();
    n.depth = a.at(5).get<int>();
    n.n_treated = a.at(6).get<int>();
    n.n_control = a.at(7).get<int>();
    t.nodes.push_back(n);
  }
  t.validate();
  return t;
}

inline Json tree_params_to_json(const TreeParams& p) {
  return {{"max_depth", p.max_depth}, {"min_node_size", p.min_node_size}, {"min_split_gain", p.min_split_gain}};
}

inline TreeParams tree_params_from_json(const Json& j) {
  TreeParams p;
  p.max_depth = j.at("max_depth").get<int>();
  p.min_node_size = j.at("min_node_size").get<int>();
  p.min_split_gain = j.at("min_split_gain").get<double>();
  return p;
}

inline Json forest_params_to_json(const ForestParams& p) {
  return {{"n_trees", p.n_trees},
          {"mtry", p.mtry},
          {"bootstrap_fraction", p.bootstrap_fraction},
          {"seed", p.seed},
          {"tree_params", tree_params_to_json(p.tree_params)}};
}

inline ForestParams forest_params_from_json(const Json& j) {
  ForestParams p;
  p.n_trees = j.at("n_trees").get<int>();
  p.mtry = j.at("mtry").get<int>();
  p.bootstrap_fraction = j.at("bootstrap_fraction").get<double>();
  p.seed = j.at("seed").get<std::uint64_t>();
  p.tree_params = tree_params_from_json(j.at("tree_params"));
  return p;
}

inline Json trees_to_json(const std::vector<TreeModel>& trees) {
  Json arr = Json::array();
  for (const auto& t : trees) arr.push_back(tree_to_json(t));
  return arr;
}

inline std::vector<TreeModel> trees_from_json(const Json& j) {
  std::vector<TreeModel> out;
  for (const auto& t : j) out.push_back(tree_from_json(t));
  return out;
}

inline Json forest_to_json(const ForestModel& f) {
  return {{"feature_count", f.feature_count}, {"params", forest_params_to_json(f.params)}, {"trees", trees_to_json(f.trees)}};
}

inline ForestModel forest_from_json(const Json& j) {
  ForestModel f;
  f.feature_count = j.at("feature_count").get<int>();
  f.params = forest_params_from_json(j.at("params"));
  f.trees = trees_from_json(j.at("trees"));
  if (f.trees.empty()) throw DataError("forest JSON has no trees");
  return f;
}

inline Json lasso_to_json(const LassoModel& m) {
  return {{"intercept", m.intercept},
          {"coefficients", vector_to_json(m.coefficients)},
          {"lambda", m.lambda},
          {"feature_mean", vector_to_json(m.feature_mean)},
          {"feature_sd", vector_to_json(m.feature_sd)}};
}

inline LassoModel lasso_from_json(const Json& j) {
  LassoModel m;
  m.intercept = j.at("intercept").get<double>();
  m.coefficients = vector_from_json(j.at("coefficients"));
  m.lambda = j.at("lambda").get<double>();
  m.feature_mean = vector_from_json(j.at("feature_mean"));
  m.feature_sd = vector_from_json(j.at("feature_sd"));
  return m;
}

}  // namespace json_io
}  // namespace mtcate
