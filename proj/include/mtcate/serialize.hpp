#pragma once

#include "mtcate/aggregate.hpp"
#include "mtcate/causal_forest.hpp"
#include "mtcate/cate.hpp"
#include "mtcate/meta.hpp"

#include <filesystem>
#include <fstream>
#include <string>

namespace mtcate {

inline constexpr int kModelFormatVersion = 1;

// Rebuilds any fitted CateModel from its to_json() document.
inline CateModelPtr model_from_json(const Json& j) {
  if (!j.is_object() || !j.contains("kind")) throw DataError("model JSON has no \"kind\" field");
  const auto kind = j.at("kind").get<std::string>();
  try {
    if (kind == "s_learner") return SLearnerModel::from_json(j);
    if (kind == "x_learner") return XLearnerModel::from_json(j);
    if (kind == "causal_forest") return CausalForestModel::from_json(j);
    if (kind == "pooled") return PooledModel::from_json(j, model_from_json);
    if (kind == "ensemble") return EnsembleModel::from_json(j);
    if (kind == "meta") return MetaAnalysisModel::from_json(j);
  } catch (const Json::exception& e) {
    throw DataError("malformed " + kind + " model JSON: " + e.what());
  }
  throw DataError("unknown model kind '" + kind + "'");
}

// {"format_version": 1, "method": ..., "covariates": [...], "model": {...}}
struct SavedModel {
  std::string method;
  std::vector<std::string> covariates;
  CateModelPtr model;
};

inline void save_model(const SavedModel& m, const std::filesystem::path& path) {
  const Json j{{"format_version", kModelFormatVersion},
               {"method", m.method},
               {"covariates", m.covariates},
               {"model", m.model->to_json()}};
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump() << '\n';
}

inline SavedModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open model file " + path.string());
  Json j;
  try {
    in >> j;
  } catch (const Json::exception& e) {
    throw DataError(path.string() + ": not valid JSON (" + e.what() + ")");
  }
  if (j.value("format_version", 0) != kModelFormatVersion)
    throw DataError(path.string() + ": unsupported model format version");
  SavedModel m;
  m.method = j.value("method", std::string());
  m.covariates = j.at("covariates").get<std::vector<std::string>>();
  m.model = model_from_json(j.at("model"));
  if (static_cast<int>(m.covariates.size()) != m.model->feature_count())
    throw DataError(path.string() + ": covariate list does not match the model");
  return m;
}

}  // namespace mtcate
