#pragma once

#include "mtcate/aggregate.hpp"
#include "mtcate/meta.hpp"
#include "mtcate/ols.hpp"
#include "mtcate/parallel.hpp"
#include "mtcate/simulate.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace mtcate {

enum class Aggregation { pool, indicator, tree, forest, lasso, meta };

inline std::string to_string(Aggregation a) {
  switch (a) {
    case Aggregation::pool: return "Pool";
    case Aggregation::indicator: return "Indicator";
    case Aggregation::tree: return "Tree";
    case Aggregation::forest: return "Forest";
    case Aggregation::lasso: return "Lasso";
    case Aggregation::meta: return "Meta";
  }
  return "?";
}

// One of the 16 method combinations: a learner crossed with one of five
// aggregations, or the meta-analysis (no learner).
struct Method {
  Learner learner = Learner::s;
  Aggregation aggregation = Aggregation::pool;

  std::string name() const {
    return aggregation == Aggregation::meta ? "Meta" : to_string(learner) + "-" + to_string(aggregation);
  }
  bool is_ensemble() const {
    return aggregation == Aggregation::tree || aggregation == Aggregation::forest || aggregation == Aggregation::lasso;
  }
  friend bool operator==(const Method& a, const Method& b) { return a.name() == b.name(); }
};

inline std::vector<Method> all_methods() {
  std::vector<Method> out;
  for (auto l : {Learner::s, Learner::x, Learner::cf})
    for (auto a : {Aggregation::pool, Aggregation::indicator, Aggregation::tree, Aggregation::forest, Aggregation::lasso})
      out.push_back({l, a});
  out.push_back({Learner::s, Aggregation::meta});
  return out;
}

inline Method method_from_string(const std::string& name) {
  for (const auto& m : all_methods())
    if (m.name() == name) return m;
  throw DataError("unknown method '" + name + "' (expected e.g. CF-Indicator, X-Lasso or Meta)");
}

inline std::vector<Method> parse_methods(const std::string& comma_list) {
  if (comma_list.empty() || comma_list == "all") return all_methods();
  std::vector<Method> out;
  std::stringstream ss(comma_list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = csv::trim(item);
    if (item.empty()) continue;
    const auto m = method_from_string(item);
    if (std::find(out.begin(), out.end(), m) == out.end()) out.push_back(m);
  }
  if (out.empty()) throw DataError("empty method list");
  return out;
}

struct BenchmarkOptions {
  std::vector<Method> methods = all_methods();
  bool honesty = false;
  ForestParams forest = [] {
    ForestParams p;
    p.n_trees = 200;
    return p;
  }();
  EnsembleParams ensemble = [] {
    EnsembleParams e;
    e.forest.n_trees = 200;
    e.forest.mtry = std::numeric_limits<int>::max();  // all features; see resolve_ensemble
    e.forest.bootstrap_fraction = 0.1;
    return e;
  }();
  XLearnerOptions x{};
  int moderator_index = 1;
  int workers = 1;
};

struct ReplicationRecord {
  std::string scenario;
  std::string sd_pair;
  double sigma_beta = 0.0;
  double sigma_delta = 0.0;
  int rep = 0;
  std::string method;
  double mse = std::numeric_limits<double>::quiet_NaN();
  std::string error;  // empty on success

  bool ok() const { return error.empty(); }
};

struct SummaryRow {
  std::string method;
  std::string scenario;
  std::string sd_pair;
  double sigma_beta = 0.0;
  double sigma_delta = 0.0;
  double mean_mse = std::numeric_limits<double>::quiet_NaN();
  double sd_mse = std::numeric_limits<double>::quiet_NaN();
  int n_reps = 0;    // successful replications
  int n_failed = 0;  // recorded failures
};

struct BenchmarkReport {
  std::vector<ReplicationRecord> replications;  // ordered by (config, rep, method)
  std::vector<SummaryRow> summary;              // ordered by (config, method)

  const SummaryRow& cell(const std::string& method, const std::string& scenario, const std::string& sd_pair) const {
    for (const auto& r : summary)
      if (r.method == method && r.scenario == scenario && r.sd_pair == sd_pair) return r;
    throw DataError("no summary cell for " + method + " / " + scenario + " / " + sd_pair);
  }
};

namespace detail {

inline EnsembleParams resolve_ensemble(EnsembleParams e, int design_width) {
  e.forest.mtry = std::min(e.forest.mtry, design_width);
  return e;
}

inline std::uint64_t method_seed(const ScenarioConfig& cfg, int rep, std::string_view tag) {
  return derive_seed(cfg.seed, {static_cast<std::uint64_t>(rep), hash_tag(tag)});
}

// All requested methods on one generated replication, in `methods` order.
inline std::vector<ReplicationRecord> run_replication(const ScenarioConfig& cfg, int rep, const BenchmarkOptions& opt) {
  const auto sim = generate_trials(cfg, rep);
  const auto& d = sim.data;
  std::vector<ReplicationRecord> out;
  for (const auto& m : opt.methods) {
    ReplicationRecord r;
    r.scenario = to_string(cfg.scenario);
    r.sd_pair = cfg.sd_pair();
    r.sigma_beta = cfg.scenario == Scenario::s2 ? 0.0 : cfg.sigma_beta;
    r.sigma_delta = cfg.scenario == Scenario::s2 ? 0.0 : cfg.sigma_delta;
    r.rep = rep;
    r.method = m.name();
    out.push_back(r);
  }
  auto record = [&](const Method& m, auto&& estimate) {
    for (std::size_t k = 0; k < opt.methods.size(); ++k) {
      if (!(opt.methods[k] == m)) continue;
      try {
        const Vector est = estimate();
        out[k].mse = compute_mse(est, sim.tau);
      } catch (const std::exception& e) {
        out[k].error = e.what();
      }
    }
  };

  for (auto learner : {Learner::s, Learner::x, Learner::cf}) {
    LearnerSpec spec;
    spec.learner = learner;
    spec.forest = opt.forest;
    spec.x = opt.x;
    spec.honesty = learner == Learner::cf && opt.honesty;
    auto wanted = [&](Aggregation a) {
      return std::find(opt.methods.begin(), opt.methods.end(), Method{learner, a}) != opt.methods.end();
    };
    const std::string L = to_string(learner);
    if (wanted(Aggregation::pool))
      record({learner, Aggregation::pool}, [&] {
        spec.forest.seed = method_seed(cfg, rep, L + "-Pool");
        return fit_complete_pooling(d, spec)->predict(d.covariates, d.trial);
      });
    if (wanted(Aggregation::indicator))
      record({learner, Aggregation::indicator}, [&] {
        spec.forest.seed = method_seed(cfg, rep, L + "-Indicator");
        return fit_indicator_pooling(d, spec)->predict(d.covariates, d.trial);
      });
    if (wanted(Aggregation::tree) || wanted(Aggregation::forest) || wanted(Aggregation::lasso)) {
      // Local models and the augmented dataset are shared by the three ensembles.
      std::optional<AugmentedDataset> aug;
      std::string failure;
      try {
        spec.forest.seed = method_seed(cfg, rep, L + "-local");
        const auto locals = fit_local_models(d, spec);
        aug = build_augmented_dataset(locals, d);
      } catch (const std::exception& e) {
        failure = std::string("local models: ") + e.what();
      }
      for (auto a : {Aggregation::tree, Aggregation::forest, Aggregation::lasso}) {
        if (!wanted(a)) continue;
        record({learner, a}, [&]() -> Vector {
          if (!aug) throw NumericalError(failure);
          auto ep = resolve_ensemble(opt.ensemble, static_cast<int>(aug->X.cols()) + onehot_width(aug->model_levels()));
          ep.forest.seed = method_seed(cfg, rep, L + "-" + to_string(a));
          ep.lasso.seed = ep.forest.seed;
          const auto kind = a == Aggregation::tree ? EnsembleKind::tree
                            : a == Aggregation::forest ? EnsembleKind::forest
                                                       : EnsembleKind::lasso;
          return fit_ensemble(*aug, kind, ep)->predict(d.covariates, d.trial);
        });
      }
    }
  }
  record({Learner::s, Aggregation::meta},
         [&] { return fit_ipd_meta(d, opt.moderator_index)->predict(d.covariates, d.trial); });
  return out;
}

inline double sample_sd(const std::vector<double>& v) {
  if (v.size() < 2) return std::numeric_limits<double>::quiet_NaN();
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

}  // namespace detail

// Runs every (config, replication) unit, optionally on several workers. Each
// unit draws only from its own seed substreams and writes its own slot, so
// the report does not depend on the worker count.
inline BenchmarkReport run_benchmark(const std::vector<ScenarioConfig>& grid, const BenchmarkOptions& opt) {
  if (grid.empty()) throw DataError("benchmark: empty configuration grid");
  if (opt.methods.empty()) throw DataError("benchmark: empty method set");
  for (const auto& c : grid) c.validate();
  struct Unit {
    std::size_t config;
    int rep;
  };
  std::vector<Unit> units;
  for (std::size_t c = 0; c < grid.size(); ++c)
    for (int r = 0; r < grid[c].n_reps; ++r) units.push_back({c, r});
  std::vector<std::vector<ReplicationRecord>> slots(units.size());
  parallel_for(units.size(), opt.workers, [&](std::size_t u) {
    slots[u] = detail::run_replication(grid[units[u].config], units[u].rep, opt);
  });

  BenchmarkReport report;
  for (auto& s : slots)
    for (auto& r : s) report.replications.push_back(std::move(r));
  std::size_t offset = 0;
  for (const auto& cfg : grid) {
    const std::size_t count = static_cast<std::size_t>(cfg.n_reps) * opt.methods.size();
    for (std::size_t k = 0; k < opt.methods.size(); ++k) {
      SummaryRow row;
      row.method = opt.methods[k].name();
      std::vector<double> mses;
      for (std::size_t i = offset + k; i < offset + count; i += opt.methods.size()) {
        const auto& r = report.replications[i];
        row.scenario = r.scenario;
        row.sd_pair = r.sd_pair;
        row.sigma_beta = r.sigma_beta;
        row.sigma_delta = r.sigma_delta;
        if (r.ok()) mses.push_back(r.mse);
        else ++row.n_failed;
      }
      row.n_reps = static_cast<int>(mses.size());
      if (!mses.empty()) {
        double s = 0.0;
        for (double v : mses) s += v;
        row.mean_mse = s / static_cast<double>(mses.size());
        row.sd_mse = detail::sample_sd(mses);
      }
      report.summary.push_back(row);
    }
    offset += count;
  }
  return report;
}

// Cartesian grid helper: one config per (scenario, SD pair) for scenarios 1a
// and 1b, and a single config for scenario 2.
inline std::vector<ScenarioConfig> make_grid(const ScenarioConfig& base, const std::vector<Scenario>& scenarios,
                                             const std::vector<std::string>& sd_pairs) {
  std::vector<ScenarioConfig> grid;
  for (auto s : scenarios) {
    if (s == Scenario::s2) {
      auto c = base;
      c.scenario = s;
      c.sigma_beta = 0.0;
      c.sigma_delta = 0.0;
      grid.push_back(c);
      continue;
    }
    for (const auto& name : sd_pairs) {
      const auto& pr = sd_pair_by_name(name);
      auto c = base;
      c.scenario = s;
      c.sigma_beta = pr.sigma_beta;
      c.sigma_delta = pr.sigma_delta;
      grid.push_back(c);
    }
  }
  return grid;
}

// ---------------------------------------------------------------------------
// CSV output
// ---------------------------------------------------------------------------

inline std::string format_cell(double v) { return std::isnan(v) ? std::string("NA") : csv::format_double(v); }

inline std::string csv_quote(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c == '\n' ? ' ' : c;
  }
  return out + "\"";
}

// method,scenario,sd_pair,mean_mse,sd_mse,n_reps
inline void write_summary_csv(const BenchmarkReport& r, std::ostream& out) {
  out << "method,scenario,sd_pair,mean_mse,sd_mse,n_reps\n";
  for (const auto& s : r.summary)
    out << s.method << ',' << s.scenario << ',' << s.sd_pair << ',' << format_cell(s.mean_mse) << ','
        << format_cell(s.sd_mse) << ',' << s.n_reps << '\n';
}

// scenario,sd_pair,sigma_beta,sigma_delta,rep,method,mse,error
inline void write_replications_csv(const BenchmarkReport& r, std::ostream& out) {
  out << "scenario,sd_pair,sigma_beta,sigma_delta,rep,method,mse,error\n";
  for (const auto& x : r.replications)
    out << x.scenario << ',' << x.sd_pair << ',' << csv::format_double(x.sigma_beta) << ','
        << csv::format_double(x.sigma_delta) << ',' << x.rep << ',' << x.method << ',' << format_cell(x.mse) << ','
        << csv_quote(x.error) << '\n';
}

// Reads summary.csv back; SD parameters are recovered from the pair names.
inline std::vector<SummaryRow> read_summary_csv(const std::filesystem::path& path) {
  const auto t = csv::read_table(path);
  const int cm = t.column("method"), cs = t.column("scenario"), cp = t.column("sd_pair"), cmean = t.column("mean_mse"),
            csd = t.column("sd_mse"), cn = t.column("n_reps");
  if (cm < 0 || cs < 0 || cp < 0 || cmean < 0 || csd < 0 || cn < 0)
    throw DataError(path.string() + ": expected columns method,scenario,sd_pair,mean_mse,sd_mse,n_reps");
  std::vector<SummaryRow> out;
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const auto& row = t.rows[i];
    SummaryRow s;
    s.method = row[static_cast<std::size_t>(cm)];
    s.scenario = row[static_cast<std::size_t>(cs)];
    s.sd_pair = row[static_cast<std::size_t>(cp)];
    const auto mean = csv::parse_double(row[static_cast<std::size_t>(cmean)]);
    const auto sd = csv::parse_double(row[static_cast<std::size_t>(csd)]);
    const auto n = csv::parse_double(row[static_cast<std::size_t>(cn)]);
    if (!n) throw DataError(path.string() + ": row " + std::to_string(i + 2) + ": n_reps is not a number");
    s.mean_mse = mean.value_or(std::numeric_limits<double>::quiet_NaN());
    s.sd_mse = sd.value_or(std::numeric_limits<double>::quiet_NaN());
    s.n_reps = static_cast<int>(*n);
    for (const auto& pr : kSdLadder)
      if (s.sd_pair == pr.name) {
        s.sigma_beta = pr.sigma_beta;
        s.sigma_delta = pr.sigma_delta;
      }
    out.push_back(s);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Regression of cell-mean MSE on method factors
// ---------------------------------------------------------------------------

struct MseRegression {
  CoefTable table;
  Matrix design;  // without the intercept column
  Vector response;
  std::vector<std::string> names;
};

// Cell-mean MSE regressed on learner (reference S), aggregation (reference
// Pool), their interaction, sigma_beta, sigma_delta and scenario (reference
// 1a). Meta-analysis and scenario 2 cells are excluded; terms that do not
// vary in the remaining cells are dropped.
inline MseRegression regress_mse(const std::vector<SummaryRow>& summary) {
  struct Obs {
    Method m;
    const SummaryRow* row;
  };
  std::vector<Obs> obs;
  for (const auto& s : summary) {
    if (s.method == "Meta" || s.scenario == "2" || std::isnan(s.mean_mse)) continue;
    obs.push_back({method_from_string(s.method), &s});
  }
  if (obs.empty()) throw DataError("regress_mse: no eligible cells (Meta and scenario 2 are excluded)");

  std::vector<std::string> names;
  std::vector<std::vector<double>> cols;
  auto add = [&](const std::string& name, auto&& f) {
    std::vector<double> c;
    for (const auto& o : obs) c.push_back(f(o));
    if (std::adjacent_find(c.begin(), c.end(), std::not_equal_to<>()) == c.end()) return;  // constant
    names.push_back(name);
    cols.push_back(std::move(c));
  };
  const std::vector<Learner> learners{Learner::x, Learner::cf};
  const std::vector<Aggregation> aggs{Aggregation::indicator, Aggregation::tree, Aggregation::forest,
                                      Aggregation::lasso};
  for (auto l : learners)
    add("learner:" + to_string(l), [&](const Obs& o) { return o.m.learner == l ? 1.0 : 0.0; });
  for (auto a : aggs)
    add("aggregation:" + to_string(a), [&](const Obs& o) { return o.m.aggregation == a ? 1.0 : 0.0; });
  for (auto l : learners)
    for (auto a : aggs)
      add("learner:" + to_string(l) + " x aggregation:" + to_string(a),
          [&](const Obs& o) { return o.m.learner == l && o.m.aggregation == a ? 1.0 : 0.0; });
  add("sigma_beta", [](const Obs& o) { return o.row->sigma_beta; });
  add("sigma_delta", [](const Obs& o) { return o.row->sigma_delta; });
  add("scenario:1b", [](const Obs& o) { return o.row->scenario == "1b" ? 1.0 : 0.0; });

  MseRegression out;
  out.names = names;
  out.design.resize(static_cast<Index>(obs.size()), static_cast<Index>(cols.size()));
  out.response.resize(static_cast<Index>(obs.size()));
  for (std::size_t i = 0; i < obs.size(); ++i) {
    out.response[static_cast<Index>(i)] = obs[i].row->mean_mse;
    for (std::size_t j = 0; j < cols.size(); ++j) out.design(static_cast<Index>(i), static_cast<Index>(j)) = cols[j][i];
  }
  OlsOptions o;
  o.names = names;
  out.table = fit_ols(out.design, out.response, o);
  return out;
}

inline MseRegression regress_mse(const BenchmarkReport& report) { return regress_mse(report.summary); }

// ---------------------------------------------------------------------------
// Report helpers
// ---------------------------------------------------------------------------

struct RankedCell {
  std::string scenario;
  std::string sd_pair;
  int rank = 0;
  std::string method;
  double mean_mse = 0.0;
  double ratio_to_best = 0.0;
};

// Within each (scenario, SD pair), methods ranked by mean MSE (ties broken
// by name); failed cells are omitted.
inline std::vector<RankedCell> rank_methods(const std::vector<SummaryRow>& summary) {
  std::map<std::pair<std::string, std::string>, std::vector<const SummaryRow*>> cells;
  std::vector<std::pair<std::string, std::string>> order;
  for (const auto& s : summary) {
    if (std::isnan(s.mean_mse)) continue;
    const auto key = std::make_pair(s.scenario, s.sd_pair);
    if (!cells.count(key)) order.push_back(key);
    cells[key].push_back(&s);
  }
  std::vector<RankedCell> out;
  for (const auto& key : order) {
    auto& v = cells[key];
    std::sort(v.begin(), v.end(), [](const SummaryRow* a, const SummaryRow* b) {
      return a->mean_mse != b->mean_mse ? a->mean_mse < b->mean_mse : a->method < b->method;
    });
    for (std::size_t i = 0; i < v.size(); ++i)
      out.push_back({key.first, key.second, static_cast<int>(i) + 1, v[i]->method, v[i]->mean_mse,
                     v[i]->mean_mse / v.front()->mean_mse});
  }
  return out;
}

// Mean MSE across all cells a method appears in, best first.
inline std::vector<std::pair<std::string, double>> overall_ranking(const std::vector<SummaryRow>& summary) {
  std::map<std::string, std::pair<double, int>> acc;
  for (const auto& s : summary) {
    if (std::isnan(s.mean_mse)) continue;
    acc[s.method].first += s.mean_mse;
    ++acc[s.method].second;
  }
  std::vector<std::pair<std::string, double>> out;
  for (const auto& [m, a] : acc) out.emplace_back(m, a.first / a.second);
  std::sort(out.begin(), out.end(),
            [](const auto& a, const auto& b) { return a.second != b.second ? a.second < b.second : a.first < b.first; });
  return out;
}

}  // namespace mtcate
