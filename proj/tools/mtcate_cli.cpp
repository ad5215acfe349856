// mtcate: command-line front end for simulation, benchmarking, fitting,
// prediction and interpretation of multi-trial CATE models.
//
// Exit codes: 0 success, 1 usage error, 2 data/validation error,
// 3 numerical failure.

#include "mtcate/mtcate.hpp"

#include <CLI11.hpp>
#include <openssl/evp.h>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#ifndef MTCATE_VERSION
#define MTCATE_VERSION "dev"
#endif

namespace fs = std::filesystem;
using namespace mtcate;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string iso_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream s;
  s << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return s.str();
}

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string() + " for hashing");
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (in.gcount() > 0) EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return hex.str();
}

// Collects outputs of one command and writes manifest.json next to them.
class Run {
 public:
  Run(std::string command, fs::path out_dir, std::vector<fs::path> inputs)
      : command_(std::move(command)), out_dir_(std::move(out_dir)), inputs_(std::move(inputs)), started_(iso_now()) {
    fs::create_directories(out_dir_);
  }

  Json config = Json::object();
  std::uint64_t seed = 0;

  fs::path file(const std::string& name) {
    const fs::path p = out_dir_ / name;
    for (const auto& in : inputs_)
      if (fs::exists(in) && fs::exists(p) && fs::equivalent(in, p))
        throw UsageError("output " + p.string() + " would overwrite an input file");
    outputs_.push_back(name);
    return p;
  }

  std::ofstream open(const std::string& name) {
    std::ofstream out(file(name));
    if (!out) throw DataError("cannot write " + (out_dir_ / name).string());
    return out;
  }

  void finish(const std::vector<std::string>& argv) const {
    Json digests = Json::object();
    for (const auto& name : outputs_) digests[name] = sha256_file(out_dir_ / name);
    Json inputs = Json::object();
    for (const auto& in : inputs_) inputs[in.string()] = sha256_file(in);
    const Json manifest{{"command", command_},
                        {"argv", argv},
                        {"config", config},
                        {"seed", seed},
                        {"tool_version", MTCATE_VERSION},
                        {"started", started_},
                        {"finished", iso_now()},
                        {"inputs", inputs},
                        {"outputs", digests}};
    std::ofstream out(out_dir_ / "manifest.json");
    if (!out) throw DataError("cannot write manifest in " + out_dir_.string());
    out << manifest.dump(2) << '\n';
  }

 private:
  std::string command_;
  fs::path out_dir_;
  std::vector<fs::path> inputs_;
  std::string started_;
  std::vector<std::string> outputs_;
};

// Flag values that fail to parse are usage errors, not data errors.
template <class F>
auto flag_value(const std::string& flag, F&& parse) {
  try {
    return parse();
  } catch (const DataError& e) {
    throw UsageError(flag + ": " + e.what());
  }
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (auto t = csv::trim(item); !t.empty()) out.push_back(t);
  return out;
}

Json scenario_json(const ScenarioConfig& c) {
  return {{"scenario", to_string(c.scenario)}, {"k", c.K},
          {"n", c.n_per_trial},               {"p", c.p},
          {"sigma_beta", c.sigma_beta},       {"sigma_delta", c.sigma_delta},
          {"noise_variance", c.noise_variance}, {"propensity", c.propensity},
          {"seed", c.seed},                   {"n_reps", c.n_reps}};
}

// Flags named after the ScenarioConfig keys (also accepted from --config).
struct ScenarioFlags {
  std::string scenario = "1a";
  ScenarioConfig cfg;

  void add(CLI::App* app, bool with_scenario = true) {
    if (with_scenario) app->add_option("--scenario", scenario, "Scenario: 1a, 1b or 2")->capture_default_str();
    app->add_option("--k", cfg.K, "Number of trials")->capture_default_str();
    app->add_option("--n", cfg.n_per_trial, "Rows per trial")->capture_default_str();
    app->add_option("--p", cfg.p, "Covariates per row")->capture_default_str();
    app->add_option("--sigma-beta,--sigma_beta", cfg.sigma_beta, "SD of trial main effects")->capture_default_str();
    app->add_option("--sigma-delta,--sigma_delta", cfg.sigma_delta, "SD of trial x1 interactions")
        ->capture_default_str();
    app->add_option("--sd-pair,--sd_pair", sd_pair, "Named SD pair (overrides --sigma-beta/--sigma-delta)");
    app->add_option("--noise-variance,--noise_variance", cfg.noise_variance, "Outcome noise variance")
        ->capture_default_str();
    app->add_option("--propensity", cfg.propensity, "Treatment probability")->capture_default_str();
    app->add_option("--seed", cfg.seed, "Master seed")->capture_default_str();
    app->add_option("--n-reps,--n_reps", cfg.n_reps, "Replications")->capture_default_str();
  }

  ScenarioConfig resolve() const {
    ScenarioConfig c = cfg;
    c.scenario = flag_value("--scenario", [&] { return scenario_from_string(scenario); });
    if (!sd_pair.empty()) {
      const auto& pr = flag_value("--sd-pair", [&]() -> const SdPair& { return sd_pair_by_name(sd_pair); });
      c.sigma_beta = pr.sigma_beta;
      c.sigma_delta = pr.sigma_delta;
    }
    c.validate();
    return c;
  }

  std::string sd_pair;
};

struct SchemaFlags {
  CsvSchema schema;
  std::string covariates;
  std::string impute = "reject";

  void add(CLI::App* app) {
    app->add_option("--trial-col", schema.trial_col, "Trial id column")->capture_default_str();
    app->add_option("--treat-col", schema.treat_col, "Treatment column")->capture_default_str();
    app->add_option("--outcome-col", schema.outcome_col, "Outcome column")->capture_default_str();
    app->add_option("--covariates", covariates, "Comma-separated covariate columns (default: all others)");
    app->add_option("--impute", impute, "Missing covariates: reject or mean")
        ->check(CLI::IsMember({"reject", "mean"}))
        ->capture_default_str();
  }

  CsvSchema resolve() const {
    CsvSchema s = schema;
    s.covariates = split_list(covariates);
    s.impute = impute == "mean" ? MissingCovariates::mean : MissingCovariates::reject;
    return s;
  }
};

struct ForestFlags {
  int n_trees = 500;
  int mtry = 0;
  double fraction = 0.632;
  int min_node_size = 5;
  int threads = 1;

  void add(CLI::App* app, int default_trees) {
    n_trees = default_trees;
    app->add_option("--n-trees", n_trees, "Trees per forest")->capture_default_str();
    app->add_option("--mtry", mtry, "Candidate features per split (0: ceil(p/3))")->capture_default_str();
    app->add_option("--sample-fraction", fraction, "Subsample fraction per tree")->capture_default_str();
    app->add_option("--min-node-size", min_node_size, "Minimum node size")->capture_default_str();
    app->add_option("--threads", threads, "Threads per forest fit")->capture_default_str();
  }

  ForestParams resolve(std::uint64_t seed) const {
    ForestParams p;
    p.n_trees = n_trees;
    p.mtry = mtry;
    p.bootstrap_fraction = fraction;
    p.tree_params.min_node_size = min_node_size;
    p.threads = threads;
    p.seed = seed;
    return p;
  }

  Json json() const {
    return {{"n_trees", n_trees}, {"mtry", mtry}, {"sample_fraction", fraction}, {"min_node_size", min_node_size}};
  }
};

void require_file(const std::string& path, const char* what) {
  if (path.empty()) throw UsageError(std::string("missing --") + what);
  if (!fs::exists(path)) throw DataError(std::string(what) + " file not found: " + path);
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

void cmd_simulate(const ScenarioFlags& f, int rep, const fs::path& out_dir, const std::vector<std::string>& argv) {
  const auto cfg = f.resolve();
  Run run("simulate", out_dir, {});
  run.config = scenario_json(cfg);
  run.config["rep"] = rep;
  run.seed = cfg.seed;
  const auto sim = generate_trials(cfg, rep);
  {
    auto out = run.open("data.csv");
    write_csv(sim.data, out);
  }
  {
    auto out = run.open("truth.csv");
    out << "row,trial,tau,y0,y1\n";
    for (Index i = 0; i < sim.data.rows(); ++i)
      out << i + 1 << ',' << sim.data.trial[static_cast<std::size_t>(i)] << ',' << csv::format_double(sim.tau[i]) << ','
          << csv::format_double(sim.y0[i]) << ',' << csv::format_double(sim.y1[i]) << '\n';
  }
  {
    auto out = run.open("trial_effects.csv");
    out << "trial,beta,delta\n";
    for (int s = 1; s <= cfg.K; ++s)
      out << s << ',' << csv::format_double(sim.oracle.beta[static_cast<std::size_t>(s - 1)]) << ','
          << csv::format_double(sim.oracle.delta[static_cast<std::size_t>(s - 1)]) << '\n';
  }
  run.finish(argv);
  std::cout << "wrote " << sim.data.rows() << " rows to " << (out_dir / "data.csv").string() << "\n";
}

void write_regression(Run& run, const std::vector<SummaryRow>& summary) {
  try {
    const auto reg = regress_mse(summary);
    auto out = run.open("regression.csv");
    write_coef_csv(reg.table, out);
  } catch (const std::exception& e) {
    std::cerr << "note: MSE regression skipped (" << e.what() << ")\n";
  }
}

void cmd_benchmark(const ScenarioFlags& f, const std::string& scenarios, const std::string& sd_pairs,
                   const std::string& methods, bool honesty, int workers, const ForestFlags& ff, int ensemble_trees,
                   double ensemble_fraction, int moderator, const fs::path& out_dir,
                   const std::vector<std::string>& argv) {
  ScenarioConfig base = f.cfg;
  base.validate();
  std::vector<Scenario> sc;
  for (const auto& s : split_list(scenarios))
    sc.push_back(flag_value("--scenarios", [&] { return scenario_from_string(s); }));
  if (sc.empty()) throw UsageError("--scenarios is empty");
  std::vector<std::string> pairs = split_list(sd_pairs);
  if (pairs.empty() || sd_pairs == "all") {
    pairs.clear();
    for (const auto& pr : kSdLadder) pairs.push_back(pr.name);
  }
  for (const auto& p : pairs) flag_value("--sd-pairs", [&] { return sd_pair_by_name(p).name; });
  const auto grid = make_grid(base, sc, pairs);

  BenchmarkOptions opt;
  opt.methods = flag_value("--methods", [&] { return parse_methods(methods); });
  opt.honesty = honesty;
  opt.workers = workers;
  opt.forest = ff.resolve(base.seed);
  opt.forest.threads = 1;
  opt.ensemble.forest.n_trees = ensemble_trees;
  opt.ensemble.forest.bootstrap_fraction = ensemble_fraction;
  opt.moderator_index = moderator;

  Run run("benchmark", out_dir, {});
  run.seed = base.seed;
  run.config = scenario_json(base);
  run.config.erase("scenario");
  run.config["scenarios"] = split_list(scenarios);
  run.config["sd_pairs"] = pairs;
  Json ms = Json::array();
  for (const auto& m : opt.methods) ms.push_back(m.name());
  run.config["methods"] = ms;
  run.config["honesty"] = honesty;
  run.config["workers"] = workers;
  run.config["forest"] = ff.json();
  run.config["ensemble_forest"] = {{"n_trees", ensemble_trees}, {"sample_fraction", ensemble_fraction}};
  run.config["moderator_index"] = moderator;

  const auto report = run_benchmark(grid, opt);
  {
    auto out = run.open("summary.csv");
    write_summary_csv(report, out);
  }
  {
    auto out = run.open("replications.csv");
    write_replications_csv(report, out);
  }
  write_regression(run, report.summary);
  run.finish(argv);
  int failures = 0;
  for (const auto& r : report.replications) failures += r.ok() ? 0 : 1;
  std::cout << "benchmark: " << report.replications.size() << " records, " << failures << " failures; summary in "
            << (out_dir / "summary.csv").string() << "\n";
}

void cmd_fit(const std::string& data_path, const SchemaFlags& sf, const std::string& method_name, const ForestFlags& ff,
             bool honesty, int ci_groups, int moderator, const std::string& weight_source, std::uint64_t seed,
             const fs::path& out_dir, const std::vector<std::string>& argv) {
  require_file(data_path, "data");
  LoadReport lr;
  const auto data = load_dataset(data_path, sf.resolve(), &lr);
  const auto validation = validate_assumptions(data);
  const Method method = flag_value("--method", [&] { return method_from_string(method_name); });

  LearnerSpec spec;
  spec.learner = method.learner;
  spec.forest = ff.resolve(seed);
  spec.honesty = honesty;
  spec.ci_groups = ci_groups;
  spec.x.weight_source = flag_value("--weight-source", [&] { return weight_source_from_string(weight_source); });

  CateModelPtr model;
  switch (method.aggregation) {
    case Aggregation::pool: model = fit_complete_pooling(data, spec); break;
    case Aggregation::indicator: model = fit_indicator_pooling(data, spec); break;
    case Aggregation::meta: model = fit_ipd_meta(data, moderator); break;
    default: {
      const auto locals = fit_local_models(data, spec);
      const auto aug = build_augmented_dataset(locals, data);
      EnsembleParams ep;
      ep.forest = spec.forest;
      ep.forest.mtry = static_cast<int>(aug.X.cols()) + detail::onehot_width(aug.model_levels());
      ep.forest.bootstrap_fraction = std::min(1.0, spec.forest.bootstrap_fraction / data.K());
      ep.lasso.seed = seed;
      const auto kind = method.aggregation == Aggregation::tree     ? EnsembleKind::tree
                        : method.aggregation == Aggregation::forest ? EnsembleKind::forest
                                                                    : EnsembleKind::lasso;
      model = fit_ensemble(aug, kind, ep);
    }
  }

  Run run("fit", out_dir, {data_path});
  run.seed = seed;
  run.config = {{"data", data_path},         {"method", method.name()},  {"forest", ff.json()},
                {"honesty", honesty},        {"ci_groups", ci_groups},   {"moderator_index", moderator},
                {"weight_source", weight_source}, {"trial_col", sf.schema.trial_col},
                {"treat_col", sf.schema.treat_col}, {"outcome_col", sf.schema.outcome_col},
                {"covariates", data.covariate_names}, {"impute", sf.impute}};
  save_model({method.name(), data.covariate_names, model}, run.file("model.json"));
  {
    Json findings = Json::array();
    for (const auto* list : {&validation.violations, &validation.warnings})
      for (const auto& fnd : *list)
        findings.push_back({{"trial", fnd.trial},
                            {"assumption", fnd.assumption},
                            {"severity", list == &validation.violations ? "violation" : "warning"},
                            {"message", fnd.message}});
    Json props = Json::array();
    for (auto [id, p] : validation.per_trial_propensity) props.push_back({{"trial", id}, {"treated_fraction", p}});
    const Json rep{{"rows_used", data.rows()},
                   {"trials", data.trial_ids},
                   {"rejected_rows", lr.rejected_rows},
                   {"rejection_reasons", lr.rejection_reasons},
                   {"imputed_cells", lr.imputed_cells},
                   {"validation_passed", validation.passed},
                   {"per_trial_propensity", props},
                   {"membership_fraction_in_bounds", validation.membership_fraction_in_bounds},
                   {"findings", findings}};
    auto out = run.open("fit_report.json");
    out << rep.dump(2) << '\n';
  }
  run.finish(argv);
  for (const auto& v : validation.violations) std::cerr << "violation: " << v.message << "\n";
  for (const auto& w : validation.warnings) std::cerr << "warning: " << w.message << "\n";
  std::cout << "fitted " << method.name() << " on " << data.rows() << " rows (" << lr.rejected_rows.size()
            << " rejected); model in " << (out_dir / "model.json").string() << "\n";
}

// A causal forest reachable from the model, and how to build its design.
struct ForestView {
  const CausalForestModel* forest = nullptr;
  const PooledModel* pooled = nullptr;

  Matrix design(const Matrix& X, const std::vector<int>& trials) const {
    if (pooled == nullptr || !pooled->indicator) return X;
    if (trials.empty()) throw DataError("this model needs a trial column to predict");
    return detail::append_onehot(X, trials, pooled->trial_ids, "trial id");
  }
};

ForestView find_causal_forest(const CateModelPtr& m) {
  ForestView v;
  v.forest = dynamic_cast<const CausalForestModel*>(m.get());
  if (v.forest == nullptr) {
    v.pooled = dynamic_cast<const PooledModel*>(m.get());
    if (v.pooled != nullptr) v.forest = dynamic_cast<const CausalForestModel*>(v.pooled->inner.get());
  }
  return v;
}

void cmd_predict(const std::string& model_path, const std::string& data_path, const std::string& trial_col, bool ci,
                 const fs::path& out_dir, const std::vector<std::string>& argv) {
  require_file(model_path, "model");
  require_file(data_path, "data");
  const auto saved = load_model(model_path);
  const auto table = load_covariates(data_path, saved.covariates, trial_col);
  Run run("predict", out_dir, {model_path, data_path});
  run.config = {{"model", model_path}, {"data", data_path}, {"trial_col", trial_col}, {"ci", ci}};
  const Vector est = saved.model->predict(table.covariates, table.trial);
  std::optional<CateIntervals> iv;
  if (ci) {
    const auto view = find_causal_forest(saved.model);
    if (view.forest == nullptr) throw DataError("--ci needs a causal-forest model (complete or indicator pooling)");
    iv = estimate_cate_variance(*view.forest, view.design(table.covariates, table.trial));
  }
  auto out = run.open("predictions.csv");
  out << "row" << (table.trial.empty() ? "" : ",trial") << ",cate" << (iv ? ",variance,lower,upper" : "") << "\n";
  for (Index i = 0; i < est.size(); ++i) {
    out << i + 1;
    if (!table.trial.empty()) out << ',' << table.trial[static_cast<std::size_t>(i)];
    out << ',' << csv::format_double(est[i]);
    if (iv)
      out << ',' << csv::format_double(iv->variance[i]) << ',' << csv::format_double(iv->lower[i]) << ','
          << csv::format_double(iv->upper[i]);
    out << '\n';
  }
  out.close();
  run.finish(argv);
  std::cout << "wrote " << est.size() << " predictions to " << (out_dir / "predictions.csv").string() << "\n";
}

void cmd_interpret(const std::string& model_path, const std::string& data_path, const SchemaFlags& sf,
                   const std::string& blp_covariates, int tree_depth, int tree_min_node, double decay, int depth,
                   std::uint64_t seed, const fs::path& out_dir, const std::vector<std::string>& argv) {
  require_file(model_path, "model");
  require_file(data_path, "data");
  const auto saved = load_model(model_path);
  CsvSchema schema = sf.resolve();
  if (schema.covariates.empty()) schema.covariates = saved.covariates;
  const auto data = load_dataset(data_path, schema);
  if (data.covariate_names != saved.covariates) throw DataError("dataset covariates do not match the model's");
  Run run("interpret", out_dir, {model_path, data_path});
  run.seed = seed;
  run.config = {{"model", model_path},      {"data", data_path},           {"blp_covariates", blp_covariates},
                {"tree_max_depth", tree_depth}, {"tree_min_node_size", tree_min_node}, {"importance_decay", decay},
                {"importance_max_depth", depth}};

  // Plot-ready CATE per row.
  const Vector cates = saved.model->predict(data.covariates, data.trial);
  {
    auto out = run.open("cate.csv");
    out << "row,trial";
    for (const auto& n : data.covariate_names) out << ',' << n;
    out << ",cate\n";
    for (Index i = 0; i < data.rows(); ++i) {
      out << i + 1 << ',' << data.trial[static_cast<std::size_t>(i)];
      for (Index j = 0; j < data.covariates.cols(); ++j) out << ',' << csv::format_double(data.covariates(i, j));
      out << ',' << csv::format_double(cates[i]) << '\n';
    }
  }

  // Importance over the model's forest, when it has one.
  std::vector<std::string> names = data.covariate_names;
  const auto view = find_causal_forest(saved.model);
  if (view.forest != nullptr) {
    if (view.pooled != nullptr && view.pooled->indicator && view.pooled->trial_ids.size() >= 2)
      for (int id : view.pooled->trial_ids) names.push_back("trial:" + std::to_string(id));
    const auto imp = variable_importance(*view.forest, decay, depth, names);
    auto out = run.open("importance.csv");
    write_importance_csv(imp, out);
    if (imp.no_splits) std::cerr << "note: forest has no splits; importance is all zero\n";
  } else {
    std::cerr << "note: importance needs a causal-forest model; skipped\n";
  }

  // Interpretation tree on covariates plus trial one-hots.
  std::vector<std::string> tree_names = data.covariate_names;
  if (data.K() >= 2)
    for (int id : data.trial_ids) tree_names.push_back("trial:" + std::to_string(id));
  const Matrix tree_X = detail::append_onehot(data.covariates, data.trial, data.trial_ids, "trial id");
  const auto tree = fit_interpretation_tree(cates, tree_X, TreeParams{tree_depth, tree_min_node, 0.0});
  {
    auto out = run.open("interpretation_tree.json");
    out << Json{{"features", tree_names}, {"tree", json_io::tree_to_json(tree)}}.dump(2) << '\n';
  }
  {
    auto out = run.open("interpretation_tree.txt");
    out << render_tree_text(tree, tree_names, &tree_X);
  }

  BlpOptions bo;
  bo.covariates = split_list(blp_covariates);
  bo.outcome_forest.seed = seed;
  const auto blp = best_linear_projection(*saved.model, data, bo);
  {
    auto out = run.open("blp.csv");
    write_coef_csv(blp.table, out);
  }
  run.finish(argv);
  std::cout << "interpretation written to " << out_dir.string() << "\n";
}

void cmd_report(const std::string& summary_path, const fs::path& out_dir, const std::vector<std::string>& argv) {
  require_file(summary_path, "summary");
  const auto summary = read_summary_csv(summary_path);
  Run run("report", out_dir, {summary_path});
  run.config = {{"summary", summary_path}};
  const auto ranked = rank_methods(summary);
  {
    auto out = run.open("ranked.csv");
    out << "scenario,sd_pair,rank,method,mean_mse,ratio_to_best\n";
    for (const auto& r : ranked)
      out << r.scenario << ',' << r.sd_pair << ',' << r.rank << ',' << r.method << ',' << csv::format_double(r.mean_mse)
          << ',' << csv::format_double(r.ratio_to_best) << '\n';
  }
  {
    // Wide table: one row per (scenario, method), one column per SD pair.
    std::vector<std::string> pairs;
    std::map<std::pair<std::string, std::string>, std::map<std::string, double>> wide;
    std::vector<std::pair<std::string, std::string>> order;
    for (const auto& s : summary) {
      if (std::find(pairs.begin(), pairs.end(), s.sd_pair) == pairs.end()) pairs.push_back(s.sd_pair);
      const auto key = std::make_pair(s.scenario, s.method);
      if (!wide.count(key)) order.push_back(key);
      wide[key][s.sd_pair] = s.mean_mse;
    }
    auto out = run.open("comparison.csv");
    out << "scenario,method";
    for (const auto& p : pairs) out << ',' << p;
    out << '\n';
    for (const auto& key : order) {
      out << key.first << ',' << key.second;
      for (const auto& p : pairs) {
        const auto& row = wide[key];
        const auto it = row.find(p);
        out << ',' << (it == row.end() ? std::string() : format_cell(it->second));
      }
      out << '\n';
    }
  }
  write_regression(run, summary);
  run.finish(argv);

  std::cout << "overall ranking (mean of cell-mean MSEs):\n";
  int k = 0;
  for (const auto& [m, v] : overall_ranking(summary))
    std::cout << std::setw(3) << ++k << "  " << std::left << std::setw(14) << m << std::right << std::setprecision(4)
              << v << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::string> args(argv, argv + argc);
  CLI::App app{"Multi-trial CATE estimation, simulation and benchmarking"};
  app.set_version_flag("--version", MTCATE_VERSION);
  app.set_config("--config", "", "Flat key = value configuration file");
  app.require_subcommand(1);

  fs::path out_dir = "out";

  auto* sim = app.add_subcommand("simulate", "Generate one simulated multi-trial dataset with oracle CATEs");
  ScenarioFlags sim_flags;
  int sim_rep = 0;
  sim_flags.add(sim);
  sim->add_option("--rep", sim_rep, "Replication index")->capture_default_str();
  sim->add_option("--out-dir", out_dir, "Output directory")->capture_default_str();

  auto* bench = app.add_subcommand("benchmark", "Run the Monte Carlo method comparison");
  ScenarioFlags bench_flags;
  bench_flags.cfg.n_reps = 10;
  bench_flags.add(bench, false);
  std::string scenarios = "1a", sd_pairs = "all", methods = "all";
  bool honesty = false;
  int workers = 1, ensemble_trees = 200, moderator = 1;
  double ensemble_fraction = 0.1;
  ForestFlags bench_forest;
  bench_forest.add(bench, 200);
  bench->add_option("--scenarios", scenarios, "Comma list of scenarios (1a,1b,2)")->capture_default_str();
  bench->add_option("--sd-pairs", sd_pairs, "Comma list of SD pairs, or all")->capture_default_str();
  bench->add_option("--methods", methods, "Comma list of method names, or all")->capture_default_str();
  bench->add_flag("--honesty", honesty, "Use honest causal forests");
  bench->add_option("--workers", workers, "Parallel replications")->capture_default_str();
  bench->add_option("--ensemble-trees", ensemble_trees, "Trees in the ensemble forest")->capture_default_str();
  bench->add_option("--ensemble-fraction", ensemble_fraction, "Subsample fraction of the ensemble forest")
      ->capture_default_str();
  bench->add_option("--moderator", moderator, "Covariate (1-based) used as X1 by the meta-analysis")
      ->capture_default_str();
  bench->add_option("--out-dir", out_dir, "Output directory")->capture_default_str();

  auto* fit = app.add_subcommand("fit", "Fit a CATE model to a dataset CSV");
  std::string fit_data, fit_method = "CF-Indicator", weight_source = "per_trial_empirical";
  SchemaFlags fit_schema;
  ForestFlags fit_forest;
  bool fit_honesty = false;
  int ci_groups = 0, fit_moderator = 1;
  std::uint64_t fit_seed = 42;
  fit->add_option("--data", fit_data, "Dataset CSV")->required();
  fit->add_option("--method", fit_method, "Method name, e.g. CF-Indicator, X-Lasso, Meta")->capture_default_str();
  fit_schema.add(fit);
  fit_forest.add(fit, 500);
  fit->add_flag("--honesty", fit_honesty, "Honest causal forest");
  fit->add_option("--ci-groups", ci_groups, "Tree groups for CATE intervals (causal forest; 0 disables)")
      ->capture_default_str();
  fit->add_option("--moderator", fit_moderator, "Covariate (1-based) used as X1 by the meta-analysis")
      ->capture_default_str();
  fit->add_option("--weight-source", weight_source, "X-learner weight")
      ->check(CLI::IsMember({"fixed_constant", "per_trial_empirical", "logistic"}))
      ->capture_default_str();
  fit->add_option("--seed", fit_seed, "Seed")->capture_default_str();
  fit->add_option("--out-dir", out_dir, "Output directory")->capture_default_str();

  auto* pred = app.add_subcommand("predict", "Predict CATEs from a fitted model");
  std::string pred_model, pred_data, pred_trial_col = "trial";
  bool pred_ci = false;
  pred->add_option("--model", pred_model, "model.json from fit")->required();
  pred->add_option("--data", pred_data, "Covariate CSV (optional trial column)")->required();
  pred->add_option("--trial-col", pred_trial_col, "Trial id column")->capture_default_str();
  pred->add_flag("--ci", pred_ci, "Add variance and 95% interval columns (causal forest fitted with --ci-groups)");
  pred->add_option("--out-dir", out_dir, "Output directory")->capture_default_str();

  auto* interp = app.add_subcommand("interpret", "Variable importance, interpretation tree and best linear projection");
  std::string int_model, int_data, blp_covariates;
  SchemaFlags int_schema;
  int tree_depth = 3, tree_min_node = 20, imp_depth = 4;
  double imp_decay = 0.5;
  std::uint64_t int_seed = 42;
  interp->add_option("--model", int_model, "model.json from fit")->required();
  interp->add_option("--data", int_data, "Dataset CSV the model was fitted on")->required();
  int_schema.add(interp);
  interp->add_option("--blp-covariates", blp_covariates, "Comma list for the linear projection (default: all)");
  interp->add_option("--tree-depth", tree_depth, "Interpretation tree depth")->capture_default_str();
  interp->add_option("--tree-min-node", tree_min_node, "Interpretation tree minimum node size")->capture_default_str();
  interp->add_option("--importance-decay", imp_decay, "Depth decay of split counts")->capture_default_str();
  interp->add_option("--importance-depth", imp_depth, "Deepest level counted")->capture_default_str();
  interp->add_option("--seed", int_seed, "Seed for the outcome forest")->capture_default_str();
  interp->add_option("--out-dir", out_dir, "Output directory")->capture_default_str();

  auto* rep = app.add_subcommand("report", "Rank methods from a benchmark summary.csv");
  std::string summary_path;
  rep->add_option("--summary", summary_path, "summary.csv from benchmark")->required();
  rep->add_option("--out-dir", out_dir, "Output directory")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*sim) cmd_simulate(sim_flags, sim_rep, out_dir, args);
    else if (*bench)
      cmd_benchmark(bench_flags, scenarios, sd_pairs, methods, honesty, workers, bench_forest, ensemble_trees,
                    ensemble_fraction, moderator, out_dir, args);
    else if (*fit)
      cmd_fit(fit_data, fit_schema, fit_method, fit_forest, fit_honesty, ci_groups, fit_moderator, weight_source,
              fit_seed, out_dir, args);
    else if (*pred) cmd_predict(pred_model, pred_data, pred_trial_col, pred_ci, out_dir, args);
    else if (*interp)
      cmd_interpret(int_model, int_data, int_schema, blp_covariates, tree_depth, tree_min_node, imp_decay, imp_depth,
                    int_seed, out_dir, args);
    else if (*rep) cmd_report(summary_path, out_dir, args);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return 3;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
