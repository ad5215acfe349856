#pragma once

#include "mtcate/data.hpp"
#include "mtcate/rng.hpp"

#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace mtcate {

enum class Scenario { s1a, s1b, s2 };

inline std::string to_string(Scenario s) {
  switch (s) {
    case Scenario::s1a: return "1a";
    case Scenario::s1b: return "1b";
    case Scenario::s2: return "2";
  }
  return "?";
}

inline Scenario scenario_from_string(const std::string& s) {
  if (s == "1a") return Scenario::s1a;
  if (s == "1b") return Scenario::s1b;
  if (s == "2") return Scenario::s2;
  throw DataError("unknown scenario '" + s + "' (expected 1a, 1b or 2)");
}

struct SdPair {
  const char* name;
  double sigma_beta;
  double sigma_delta;
};

// Trial main-effect / interaction SD ladder.
inline constexpr std::array<SdPair, 5> kSdLadder{{{"Low-Low", 0.5, 0.0},
                                                  {"Med-Low", 1.0, 0.0},
                                                  {"Med-Med", 1.0, 0.5},
                                                  {"Med-High", 1.0, 1.0},
                                                  {"High-High", 3.0, 1.0}}};

inline std::string sd_pair_name(double sigma_beta, double sigma_delta) {
  for (const auto& pr : kSdLadder)
    if (pr.sigma_beta == sigma_beta && pr.sigma_delta == sigma_delta) return pr.name;
  return "sb=" + csv::format_double(sigma_beta) + ";sd=" + csv::format_double(sigma_delta);
}

inline const SdPair& sd_pair_by_name(const std::string& name) {
  for (const auto& pr : kSdLadder)
    if (name == pr.name) return pr;
  throw DataError("unknown SD pair '" + name + "'");
}

struct ScenarioConfig {
  Scenario scenario = Scenario::s1a;
  int K = 10;
  int n_per_trial = 500;
  int p = 5;
  double sigma_beta = 0.5;
  double sigma_delta = 0.0;
  double noise_variance = 0.01;
  double propensity = 0.5;
  std::uint64_t seed = 1;
  int n_reps = 100;

  std::string sd_pair() const {
    return scenario == Scenario::s2 ? std::string("none") : sd_pair_name(sigma_beta, sigma_delta);
  }

  void validate() const {
    if (K < 1) throw DataError("K must be >= 1");
    if (n_per_trial < 1) throw DataError("n_per_trial must be >= 1");
    if (p < 4) throw DataError("p must be >= 4 (the outcome model uses x1..x4)");
    if (!(sigma_beta >= 0.0) || !(sigma_delta >= 0.0)) throw DataError("trial effect SDs must be >= 0");
    if (!(noise_variance >= 0.0)) throw DataError("noise_variance must be >= 0");
    if (!(propensity > 0.0 && propensity < 1.0)) throw DataError("propensity must be in (0, 1)");
    if (n_reps < 1) throw DataError("n_reps must be >= 1");
  }
};

// g(x) = 2 / (1 + exp(-12 (x - 1/2)))
inline double g_expit(double x) { return 2.0 / (1.0 + std::exp(-12.0 * (x - 0.5))); }

// Closed-form outcome mean m(x, s) and CATE tau(x, s) for one draw of the
// trial coefficients. Trial ids are 1..K.
struct TrueEffectOracle {
  Scenario scenario = Scenario::s1a;
  std::vector<double> beta;   // per trial, index s - 1
  std::vector<double> delta;  // per trial, index s - 1

  int K() const { return static_cast<int>(beta.size()); }

  double m(std::span<const double> x, int s) const {
    const double lin = x[0] / 2.0 + x[1] + x[2] + x[3];
    switch (scenario) {
      case Scenario::s1a: return lin + coef(beta, s) + coef(delta, s) * x[0];
      case Scenario::s1b: return 0.0;
      case Scenario::s2: return lin;
    }
    return 0.0;
  }

  double tau(std::span<const double> x, int s) const {
    switch (scenario) {
      case Scenario::s1a: return (x[0] > 0.0 ? x[0] : 0.0) + coef(beta, s) + coef(delta, s) * x[0];
      case Scenario::s1b: return g_expit(x[0]) * g_expit(x[1]) + coef(beta, s) + coef(delta, s) * x[0];
      case Scenario::s2:
        if (s >= 1 && s <= 4) return g_expit(x[0]) * g_expit(x[1]);
        if (s >= 5 && s <= 8) return x[0] > 0.0 ? x[0] : 0.0;
        return 0.0;
    }
    return 0.0;
  }

  Vector tau(const Matrix& X, std::span<const int> trials) const {
    Vector out(X.rows());
    std::vector<double> row(static_cast<std::size_t>(X.cols()));
    for (Index i = 0; i < X.rows(); ++i) {
      for (Index j = 0; j < X.cols(); ++j) row[static_cast<std::size_t>(j)] = X(i, j);
      out[i] = tau(row, trials[static_cast<std::size_t>(i)]);
    }
    return out;
  }

 private:
  static double coef(const std::vector<double>& v, int s) {
    if (s < 1 || s > static_cast<int>(v.size())) throw DataError("trial id " + std::to_string(s) + " out of range");
    return v[static_cast<std::size_t>(s - 1)];
  }
};

struct SimulatedTrials {
  MultiTrialDataset data;
  TrueEffectOracle oracle;
  Vector y1;   // potential outcome under treatment
  Vector y0;   // potential outcome under control
  Vector tau;  // oracle CATE at each row's own trial
};

// Y(a) = m(x, s) + (2a - 1)/2 * tau(x, s) + eps, with Y = Y(A). Every draw
// comes from a substream keyed by (seed, rep, trial, purpose).
inline SimulatedTrials generate_trials(const ScenarioConfig& cfg, int rep_index) {
  cfg.validate();
  const auto rep = static_cast<std::uint64_t>(rep_index);
  SimulatedTrials sim;
  sim.oracle.scenario = cfg.scenario;
  {
    auto rng = make_rng(cfg.seed, {rep, 0, hash_tag("trial-coefficients")});
    std::normal_distribution<double> z(0.0, 1.0);
    for (int s = 0; s < cfg.K; ++s) {
      const double zb = z(rng);
      const double zd = z(rng);
      const bool trial_terms = cfg.scenario != Scenario::s2;
      sim.oracle.beta.push_back(trial_terms ? cfg.sigma_beta * zb : 0.0);
      sim.oracle.delta.push_back(trial_terms ? cfg.sigma_delta * zd : 0.0);
    }
  }
  const Index n = static_cast<Index>(cfg.K) * cfg.n_per_trial;
  auto& d = sim.data;
  d.covariates.resize(n, cfg.p);
  d.outcome.resize(n);
  sim.y1.resize(n);
  sim.y0.resize(n);
  sim.tau.resize(n);
  for (int j = 0; j < cfg.p; ++j) d.covariate_names.push_back("x" + std::to_string(j + 1));
  const double noise_sd = std::sqrt(cfg.noise_variance);
  std::vector<double> row(static_cast<std::size_t>(cfg.p));
  Index i = 0;
  for (int s = 1; s <= cfg.K; ++s) {
    const auto key = static_cast<std::uint64_t>(s);
    auto rx = make_rng(cfg.seed, {rep, key, hash_tag("covariates")});
    auto ra = make_rng(cfg.seed, {rep, key, hash_tag("treatment")});
    auto re = make_rng(cfg.seed, {rep, key, hash_tag("noise")});
    std::normal_distribution<double> z(0.0, 1.0);
    std::bernoulli_distribution coin(cfg.propensity);
    for (int r = 0; r < cfg.n_per_trial; ++r, ++i) {
      for (int j = 0; j < cfg.p; ++j) {
        row[static_cast<std::size_t>(j)] = z(rx);
        d.covariates(i, j) = row[static_cast<std::size_t>(j)];
      }
      const int a = coin(ra) ? 1 : 0;
      const double eps = noise_sd * z(re);
      const double base = sim.oracle.m(row, s) + eps;
      const double t = sim.oracle.tau(row, s);
      sim.tau[i] = t;
      sim.y1[i] = base + 0.5 * t;
      sim.y0[i] = base - 0.5 * t;
      d.trial.push_back(s);
      d.treatment.push_back(a);
      d.outcome[i] = a ? sim.y1[i] : sim.y0[i];
    }
  }
  for (int s = 1; s <= cfg.K; ++s) d.trial_ids.push_back(s);
  return sim;
}

inline double compute_mse(const Vector& estimates, const Vector& truths) {
  if (estimates.size() != truths.size())
    throw DataError("compute_mse: length mismatch (" + std::to_string(estimates.size()) + " vs " +
                    std::to_string(truths.size()) + ")");
  if (estimates.size() == 0) throw DataError("compute_mse: empty input");
  return (estimates - truths).squaredNorm() / static_cast<double>(estimates.size());
}

}  // namespace mtcate
