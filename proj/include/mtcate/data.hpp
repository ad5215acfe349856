#pragma once

#include "mtcate/types.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace mtcate {

// Individual-level rows pooled from K trials. Trial ids are positive integers
// as they appear in the source; `trial_ids` is the sorted declared set.
struct MultiTrialDataset {
  std::vector<int> trial;
  Matrix covariates;
  std::vector<int> treatment;
  Vector outcome;
  std::vector<std::string> covariate_names;
  std::vector<int> trial_ids;

  Index rows() const { return covariates.rows(); }
  int p() const { return static_cast<int>(covariates.cols()); }
  int K() const { return static_cast<int>(trial_ids.size()); }

  // Position of a trial id within trial_ids.
  int trial_index(int id) const {
    const auto it = std::lower_bound(trial_ids.begin(), trial_ids.end(), id);
    if (it == trial_ids.end() || *it != id) throw DataError("unknown trial id " + std::to_string(id));
    return static_cast<int>(it - trial_ids.begin());
  }

  std::vector<int> rows_of(int id) const {
    std::vector<int> out;
    for (std::size_t i = 0; i < trial.size(); ++i)
      if (trial[i] == id) out.push_back(static_cast<int>(i));
    return out;
  }

  Vector treatment_vector() const {
    Vector a(rows());
    for (Index i = 0; i < rows(); ++i) a[i] = treatment[static_cast<std::size_t>(i)];
    return a;
  }

  MultiTrialDataset subset(const std::vector<int>& rows_kept) const {
    MultiTrialDataset out;
    const auto m = static_cast<Index>(rows_kept.size());
    out.covariates.resize(m, covariates.cols());
    out.outcome.resize(m);
    for (Index i = 0; i < m; ++i) {
      const int r = rows_kept[static_cast<std::size_t>(i)];
      out.covariates.row(i) = covariates.row(r);
      out.outcome[i] = outcome[r];
      out.trial.push_back(trial[static_cast<std::size_t>(r)]);
      out.treatment.push_back(treatment[static_cast<std::size_t>(r)]);
    }
    out.covariate_names = covariate_names;
    out.trial_ids = trial_ids;
    std::erase_if(out.trial_ids, [&](int id) { return std::find(out.trial.begin(), out.trial.end(), id) == out.trial.end(); });
    return out;
  }

  // Throws DataError when an invariant fails.
  void validate() const {
    const auto n = static_cast<std::size_t>(rows());
    if (trial.size() != n || treatment.size() != n || static_cast<std::size_t>(outcome.size()) != n)
      throw DataError("dataset columns have inconsistent lengths");
    if (covariate_names.size() != static_cast<std::size_t>(p()))
      throw DataError("covariate_names length does not match covariate count");
    if (trial_ids.empty()) throw DataError("dataset declares no trials");
    if (!std::is_sorted(trial_ids.begin(), trial_ids.end()) ||
        std::adjacent_find(trial_ids.begin(), trial_ids.end()) != trial_ids.end())
      throw DataError("trial_ids must be sorted and unique");
    std::vector<int> counts(trial_ids.size(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      ++counts[static_cast<std::size_t>(trial_index(trial[i]))];
      if (treatment[i] != 0 && treatment[i] != 1)
        throw DataError("row " + std::to_string(i + 1) + ": treatment must be 0 or 1");
      if (!std::isfinite(outcome[static_cast<Index>(i)]))
        throw DataError("row " + std::to_string(i + 1) + ": outcome not finite");
    }
    if (!covariates.allFinite()) throw DataError("covariates contain non-finite values");
    for (std::size_t k = 0; k < counts.size(); ++k)
      if (counts[k] == 0) throw DataError("trial " + std::to_string(trial_ids[k]) + " has no rows");
  }
};

// Builds the sorted declared trial set from per-row ids.
inline std::vector<int> distinct_trials(const std::vector<int>& trial) {
  std::vector<int> ids = trial;
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  return ids;
}

enum class MissingCovariates { reject, mean };

struct CsvSchema {
  std::string trial_col = "trial";
  std::string treat_col = "treat";
  std::string outcome_col = "y";
  std::vector<std::string> covariates;  // empty: every other column
  MissingCovariates impute = MissingCovariates::reject;
};

struct LoadReport {
  std::vector<int> rejected_rows;  // 1-based data row numbers (header excluded)
  std::vector<std::string> rejection_reasons;
  int imputed_cells = 0;
};

namespace csv {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  std::string out(s.substr(b, e - b + 1));
  if (out.size() >= 2 && out.front() == '"' && out.back() == '"') out = out.substr(1, out.size() - 2);
  return out;
}

inline std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (char c : line) {
    if (c == '"') quoted = !quoted;
    if (c == ',' && !quoted) {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(trim(cur));
  return out;
}

inline bool is_missing(const std::string& cell) {
  return cell.empty() || cell == "NA" || cell == "NaN" || cell == "nan" || cell == "null";
}

inline std::optional<double> parse_double(const std::string& cell) {
  if (is_missing(cell)) return std::nullopt;
  double v = 0.0;
  const char* b = cell.data();
  const char* e = b + cell.size();
  if (*b == '+') ++b;
  auto [ptr, ec] = std::from_chars(b, e, v);
  if (ec != std::errc() || ptr != e) return std::nullopt;
  return v;
}

// Shortest representation that parses back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  int column(const std::string& name) const {
    const auto it = std::find(header.begin(), header.end(), name);
    return it == header.end() ? -1 : static_cast<int>(it - header.begin());
  }
};

inline Table read_table(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open file: " + path.string());
  Table t;
  std::string line;
  bool have_header = false;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    auto cells = split_line(line);
    if (!have_header) {
      if (!cells.empty() && cells[0].size() >= 3 && cells[0].compare(0, 3, "\xEF\xBB\xBF") == 0)
        cells[0] = cells[0].substr(3);
      t.header = std::move(cells);
      have_header = true;
      continue;
    }
    if (cells.size() != t.header.size())
      throw DataError(path.string() + ": row " + std::to_string(t.rows.size() + 1) + " has " +
                      std::to_string(cells.size()) + " cells, header has " + std::to_string(t.header.size()));
    t.rows.push_back(std::move(cells));
  }
  if (!have_header) throw DataError(path.string() + ": empty file");
  return t;
}

}  // namespace csv

// Reads a multi-trial CSV. Rows with a missing outcome, treatment or trial are
// dropped and listed in `report`; missing covariate cells are mean-imputed
// when schema.impute == mean, otherwise the row is dropped.
inline MultiTrialDataset load_dataset(const std::filesystem::path& path, const CsvSchema& schema = {},
                                      LoadReport* report = nullptr) {
  if (!std::filesystem::exists(path)) throw DataError("file not found: " + path.string());
  const auto table = csv::read_table(path);
  const int tc = table.column(schema.trial_col);
  const int ac = table.column(schema.treat_col);
  const int yc = table.column(schema.outcome_col);
  for (auto [col, name] : {std::pair{tc, schema.trial_col}, {ac, schema.treat_col}, {yc, schema.outcome_col}})
    if (col < 0) throw DataError(path.string() + ": schema mismatch, missing column '" + name + "'");
  std::vector<int> cov_cols;
  std::vector<std::string> cov_names;
  if (schema.covariates.empty()) {
    for (int c = 0; c < static_cast<int>(table.header.size()); ++c) {
      if (c == tc || c == ac || c == yc) continue;
      cov_cols.push_back(c);
      cov_names.push_back(table.header[static_cast<std::size_t>(c)]);
    }
  } else {
    for (const auto& name : schema.covariates) {
      const int c = table.column(name);
      if (c < 0) throw DataError(path.string() + ": schema mismatch, missing covariate column '" + name + "'");
      cov_cols.push_back(c);
      cov_names.push_back(name);
    }
  }

  LoadReport local;
  LoadReport& rep = report != nullptr ? *report : local;
  struct Parsed {
    int trial, treat;
    double y;
    std::vector<std::optional<double>> x;
  };
  std::vector<Parsed> kept;
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& cells = table.rows[r];
    const int row_no = static_cast<int>(r + 1);
    auto reject = [&](const std::string& why) {
      rep.rejected_rows.push_back(row_no);
      rep.rejection_reasons.push_back(why);
    };
    const auto s = csv::parse_double(cells[static_cast<std::size_t>(tc)]);
    const auto a = csv::parse_double(cells[static_cast<std::size_t>(ac)]);
    const auto y = csv::parse_double(cells[static_cast<std::size_t>(yc)]);
    if (!s && !csv::is_missing(cells[static_cast<std::size_t>(tc)]))
      throw DataError(path.string() + ": row " + std::to_string(row_no) + ": trial id '" +
                      cells[static_cast<std::size_t>(tc)] + "' is not an integer");
    if (!a || !y || !s) {
      reject(!s ? "missing trial" : (!a ? "missing treatment" : "missing outcome"));
      continue;
    }
    if (*a != 0.0 && *a != 1.0)
      throw DataError(path.string() + ": row " + std::to_string(row_no) + ": non-binary treatment value '" +
                      cells[static_cast<std::size_t>(ac)] + "'");
    if (*s != std::floor(*s) || *s < 1.0)
      throw DataError(path.string() + ": row " + std::to_string(row_no) + ": trial id must be a positive integer");
    if (!std::isfinite(*y))
      throw DataError(path.string() + ": row " + std::to_string(row_no) + ": outcome not finite");
    Parsed p{static_cast<int>(*s), static_cast<int>(*a), *y, {}};
    bool missing_x = false;
    for (int c : cov_cols) {
      const auto& cell = cells[static_cast<std::size_t>(c)];
      auto v = csv::parse_double(cell);
      if (!v && !csv::is_missing(cell))
        throw DataError(path.string() + ": row " + std::to_string(row_no) + ": covariate '" +
                        table.header[static_cast<std::size_t>(c)] + "' is not numeric");
      if (v && !std::isfinite(*v)) v.reset();
      missing_x |= !v.has_value();
      p.x.push_back(v);
    }
    if (missing_x && schema.impute == MissingCovariates::reject) {
      reject("missing covariate");
      continue;
    }
    kept.push_back(std::move(p));
  }
  if (kept.empty()) throw DataError(path.string() + ": no usable rows");

  MultiTrialDataset d;
  const auto n = static_cast<Index>(kept.size());
  const auto p = static_cast<Index>(cov_cols.size());
  d.covariates.resize(n, p);
  d.outcome.resize(n);
  d.covariate_names = cov_names;
  for (Index j = 0; j < p; ++j) {
    double sum = 0.0;
    int cnt = 0;
    for (const auto& row : kept)
      if (row.x[static_cast<std::size_t>(j)]) {
        sum += *row.x[static_cast<std::size_t>(j)];
        ++cnt;
      }
    if (cnt == 0) throw DataError(path.string() + ": covariate '" + cov_names[static_cast<std::size_t>(j)] + "' has no observed values");
    const double mean = sum / cnt;
    for (Index i = 0; i < n; ++i) {
      const auto& v = kept[static_cast<std::size_t>(i)].x[static_cast<std::size_t>(j)];
      d.covariates(i, j) = v ? *v : mean;
      rep.imputed_cells += v ? 0 : 1;
    }
  }
  for (Index i = 0; i < n; ++i) {
    const auto& row = kept[static_cast<std::size_t>(i)];
    d.trial.push_back(row.trial);
    d.treatment.push_back(row.treat);
    d.outcome[i] = row.y;
  }
  d.trial_ids = distinct_trials(d.trial);
  d.validate();
  return d;
}

inline void write_csv(const MultiTrialDataset& d, std::ostream& out) {
  out << "trial,treat,y";
  for (const auto& name : d.covariate_names) out << ',' << name;
  out << '\n';
  for (Index i = 0; i < d.rows(); ++i) {
    out << d.trial[static_cast<std::size_t>(i)] << ',' << d.treatment[static_cast<std::size_t>(i)] << ','
        << csv::format_double(d.outcome[i]);
    for (Index j = 0; j < d.covariates.cols(); ++j) out << ',' << csv::format_double(d.covariates(i, j));
    out << '\n';
  }
}

inline void write_csv(const MultiTrialDataset& d, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  write_csv(d, out);
}

// Covariate-only input for prediction: named covariate columns plus an
// optional trial column.
struct CovariateTable {
  Matrix covariates;
  std::vector<int> trial;  // empty when the file has no trial column
};

inline CovariateTable load_covariates(const std::filesystem::path& path, const std::vector<std::string>& names,
                                      const std::string& trial_col = "trial") {
  if (!std::filesystem::exists(path)) throw DataError("file not found: " + path.string());
  const auto table = csv::read_table(path);
  std::vector<int> cols;
  for (const auto& name : names) {
    const int c = table.column(name);
    if (c < 0) throw DataError(path.string() + ": missing covariate column '" + name + "'");
    cols.push_back(c);
  }
  const int tc = table.column(trial_col);
  CovariateTable out;
  out.covariates.resize(static_cast<Index>(table.rows.size()), static_cast<Index>(cols.size()));
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    for (std::size_t j = 0; j < cols.size(); ++j) {
      const auto v = csv::parse_double(table.rows[r][static_cast<std::size_t>(cols[j])]);
      if (!v || !std::isfinite(*v))
        throw DataError(path.string() + ": row " + std::to_string(r + 1) + ": covariate '" + names[j] +
                        "' missing or not numeric");
      out.covariates(static_cast<Index>(r), static_cast<Index>(j)) = *v;
    }
    if (tc >= 0) {
      const auto s = csv::parse_double(table.rows[r][static_cast<std::size_t>(tc)]);
      if (!s) throw DataError(path.string() + ": row " + std::to_string(r + 1) + ": missing trial id");
      out.trial.push_back(static_cast<int>(*s));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Identification diagnostics
// ---------------------------------------------------------------------------

struct Finding {
  int trial = 0;       // 0 when the finding is not tied to one trial
  int assumption = 0;  // 3: treatment positivity, 4: trial-membership overlap
  std::string message;
};

struct ValidationReport {
  std::vector<std::pair<int, double>> per_trial_propensity;
  double propensity_bound_c = 0.0;
  double membership_bound_d = 0.0;
  std::vector<Finding> violations;
  std::vector<Finding> warnings;
  double membership_fraction_in_bounds = 1.0;
  double min_membership_probability = 1.0;
  double max_membership_probability = 0.0;
  bool passed = true;
};

struct MultinomialLogit {
  Vector mean, sd;
  Matrix coef;  // (K-1) x (p+1), first class is the reference

  // Class probabilities for every row, one column per class.
  Matrix probabilities(const Matrix& X) const {
    const Index n = X.rows();
    const Index k1 = coef.rows();
    Matrix out(n, k1 + 1);
    for (Index i = 0; i < n; ++i) {
      Vector z(k1 + 1);
      z[0] = 0.0;
      for (Index c = 0; c < k1; ++c) {
        double s = coef(c, 0);
        for (Index j = 0; j < X.cols(); ++j) s += coef(c, j + 1) * (sd[j] > 0 ? (X(i, j) - mean[j]) / sd[j] : 0.0);
        z[c + 1] = s;
      }
      const double mx = z.maxCoeff();
      z = (z.array() - mx).exp();
      out.row(i) = z.transpose() / z.sum();
    }
    return out;
  }
};

// Multinomial logistic regression by damped Newton iterations with a small
// ridge on the slopes; deterministic and started from the class-frequency fit.
inline MultinomialLogit fit_multinomial_logit(const Matrix& X, const std::vector<int>& klass, int n_classes,
                                             double ridge = 1e-6, int max_iter = 100) {
  const Index n = X.rows();
  const Index p = X.cols();
  const Index k1 = n_classes - 1;
  const Index q = p + 1;
  MultinomialLogit m;
  m.mean = X.colwise().mean().transpose();
  m.sd = ((X.rowwise() - m.mean.transpose()).colwise().squaredNorm().transpose() / static_cast<double>(n)).cwiseSqrt();
  Matrix Z(n, q);
  Z.col(0).setOnes();
  for (Index j = 0; j < p; ++j)
    Z.col(j + 1) = m.sd[j] > 0 ? Vector((X.col(j).array() - m.mean[j]) / m.sd[j]) : Vector::Zero(n);
  m.coef = Matrix::Zero(k1, q);
  if (k1 == 0) return m;
  std::vector<double> freq(static_cast<std::size_t>(n_classes), 0.5);
  for (int c : klass) freq[static_cast<std::size_t>(c)] += 1.0;
  for (Index c = 0; c < k1; ++c) m.coef(c, 0) = std::log(freq[static_cast<std::size_t>(c + 1)] / freq[0]);

  auto loglik = [&](const Matrix& coef) {
    double ll = 0.0;
    for (Index i = 0; i < n; ++i) {
      Vector z(k1 + 1);
      z[0] = 0.0;
      z.tail(k1) = coef * Z.row(i).transpose();
      const double mx = z.maxCoeff();
      ll += z[klass[static_cast<std::size_t>(i)]] - mx - std::log((z.array() - mx).exp().sum());
    }
    return ll - 0.5 * ridge * coef.rightCols(p).squaredNorm() * static_cast<double>(n);
  };

  double ll = loglik(m.coef);
  const Index dim = k1 * q;
  for (int it = 0; it < max_iter; ++it) {
    Vector grad = Vector::Zero(dim);
    Matrix hess = Matrix::Zero(dim, dim);
    for (Index i = 0; i < n; ++i) {
      Vector z(k1 + 1);
      z[0] = 0.0;
      z.tail(k1) = m.coef * Z.row(i).transpose();
      const double mx = z.maxCoeff();
      Vector pr = (z.array() - mx).exp();
      pr /= pr.sum();
      const Vector zi = Z.row(i).transpose();
      const Matrix zz = zi * zi.transpose();
      for (Index a = 0; a < k1; ++a) {
        const double ya = klass[static_cast<std::size_t>(i)] == a + 1 ? 1.0 : 0.0;
        grad.segment(a * q, q) += (ya - pr[a + 1]) * zi;
        for (Index b = 0; b < k1; ++b) {
          const double w = (a == b ? pr[a + 1] : 0.0) - pr[a + 1] * pr[b + 1];
          hess.block(a * q, b * q, q, q) += w * zz;
        }
      }
    }
    for (Index a = 0; a < k1; ++a)
      for (Index j = 1; j < q; ++j) {
        grad[a * q + j] -= ridge * static_cast<double>(n) * m.coef(a, j);
        hess(a * q + j, a * q + j) += ridge * static_cast<double>(n);
      }
    const Vector step = hess.ldlt().solve(grad);
    double scale = 1.0;
    Matrix trial = m.coef;
    double ll_new = ll;
    for (int half = 0; half < 30; ++half) {
      for (Index a = 0; a < k1; ++a) trial.row(a) = m.coef.row(a) + scale * step.segment(a * q, q).transpose();
      ll_new = loglik(trial);
      if (ll_new >= ll) break;
      scale /= 2.0;
    }
    if (!(ll_new >= ll)) break;
    m.coef = trial;
    const double improvement = ll_new - ll;
    ll = ll_new;
    if (improvement < 1e-10 * (1.0 + std::fabs(ll))) break;
  }
  return m;
}

struct ValidationOptions {
  double c_threshold = 0.05;
  double d_threshold = 0.01;
  double required_fraction = 0.99;
};

// Assumption 3 proxy: each trial's empirical treated fraction must lie in
// [c, 1-c]; an all-treated or all-control trial is a hard violation.
// Assumption 4 proxy: fitted trial-membership probabilities must lie in
// [d, 1-d] for `required_fraction` of rows; shortfalls are warnings only.
inline ValidationReport validate_assumptions(const MultiTrialDataset& data, const ValidationOptions& opt = {}) {
  if (!(opt.c_threshold > 0.0 && opt.c_threshold < 0.5)) throw DataError("c_threshold must be in (0, 0.5)");
  if (!(opt.d_threshold > 0.0 && opt.d_threshold < 0.5)) throw DataError("d_threshold must be in (0, 0.5)");
  data.validate();
  ValidationReport rep;
  rep.propensity_bound_c = opt.c_threshold;
  rep.membership_bound_d = opt.d_threshold;
  for (int id : data.trial_ids) {
    const auto rows = data.rows_of(id);
    double treated = 0.0;
    for (int r : rows) treated += data.treatment[static_cast<std::size_t>(r)];
    const double frac = treated / static_cast<double>(rows.size());
    rep.per_trial_propensity.emplace_back(id, frac);
    std::ostringstream msg;
    if (frac == 0.0 || frac == 1.0) {
      msg << "trial " << id << " is degenerate: " << (frac == 1.0 ? "all rows treated" : "no rows treated");
      rep.violations.push_back({id, 3, msg.str()});
    } else if (frac < opt.c_threshold || frac > 1.0 - opt.c_threshold) {
      msg << "trial " << id << " treated fraction " << frac << " outside [" << opt.c_threshold << ", "
          << 1.0 - opt.c_threshold << "]";
      rep.violations.push_back({id, 3, msg.str()});
    }
  }
  if (data.K() >= 2 && data.p() > 0) {
    std::vector<int> klass;
    for (int id : data.trial) klass.push_back(data.trial_index(id));
    const auto model = fit_multinomial_logit(data.covariates, klass, data.K());
    const Matrix probs = model.probabilities(data.covariates);
    rep.min_membership_probability = probs.minCoeff();
    rep.max_membership_probability = probs.maxCoeff();
    Index inside = 0;
    for (Index i = 0; i < probs.rows(); ++i)
      inside += (probs.row(i).array() >= opt.d_threshold).all() && (probs.row(i).array() <= 1.0 - opt.d_threshold).all();
    rep.membership_fraction_in_bounds = static_cast<double>(inside) / static_cast<double>(probs.rows());
    if (rep.membership_fraction_in_bounds < opt.required_fraction) {
      std::ostringstream msg;
      msg << "only " << rep.membership_fraction_in_bounds * 100.0 << "% of rows have every trial-membership "
          << "probability in [" << opt.d_threshold << ", " << 1.0 - opt.d_threshold << "]";
      rep.warnings.push_back({0, 4, msg.str()});
    }
  }
  rep.passed = rep.violations.empty();
  return rep;
}

}  // namespace mtcate
