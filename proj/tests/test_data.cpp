#include "mtcate/data.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <sstream>

using namespace mtcate;
using mtcate::testing::TempDir;

TEST(LoadDataset, ShapeIsPreserved) {
  TempDir dir;
  const auto f = dir.write("d.csv",
                           "trial,treat,y,age,score\n"
                           "1,0,1.5,30,0.1\n1,1,2.5,40,0.2\n1,0,0.5,50,0.3\n"
                           "2,1,3.0,35,0.4\n2,0,1.0,45,0.5\n2,1,2.0,55,0.6\n");
  const auto d = load_dataset(f);
  EXPECT_EQ(d.rows(), 6);
  EXPECT_EQ(d.K(), 2);
  EXPECT_EQ(d.p(), 2);
  EXPECT_EQ(d.covariate_names, (std::vector<std::string>{"age", "score"}));
  EXPECT_EQ(d.treatment, (std::vector<int>{0, 1, 0, 1, 0, 1}));
  EXPECT_DOUBLE_EQ(d.covariates(4, 1), 0.5);
}

TEST(LoadDataset, NonBinaryTreatmentNamesRow) {
  TempDir dir;
  const auto f = dir.write("d.csv", "trial,treat,y,x\n1,0,1,0\n1,2,1,0\n");
  try {
    load_dataset(f);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("row 2"), std::string::npos) << e.what();
  }
}

TEST(LoadDataset, MeanImputation) {
  TempDir dir;
  const auto f = dir.write("d.csv", "trial,treat,y,x1,x2\n1,0,1,1.0,5\n1,1,2,,6\n2,0,3,4.0,7\n2,1,4,7.0,8\n");
  CsvSchema s;
  s.impute = MissingCovariates::mean;
  LoadReport rep;
  const auto d = load_dataset(f, s, &rep);
  EXPECT_EQ(d.rows(), 4);
  EXPECT_DOUBLE_EQ(d.covariates(1, 0), (1.0 + 4.0 + 7.0) / 3.0);
  EXPECT_EQ(rep.imputed_cells, 1);

  LoadReport rej;
  const auto r = load_dataset(f, CsvSchema{}, &rej);
  EXPECT_EQ(r.rows(), 3);
  EXPECT_EQ(rej.rejected_rows, std::vector<int>{2});
}

TEST(LoadDataset, MissingOutcomeOrTreatmentRejectedWithRowIndex) {
  TempDir dir;
  const auto f = dir.write("d.csv", "trial,treat,y,x\n1,0,1,0\n1,,1,0\n1,1,NA,0\n1,1,2,1\n");
  LoadReport rep;
  const auto d = load_dataset(f, {}, &rep);
  EXPECT_EQ(d.rows(), 2);
  EXPECT_EQ(rep.rejected_rows, (std::vector<int>{2, 3}));
  EXPECT_EQ(rep.rejection_reasons[0], "missing treatment");
  EXPECT_EQ(rep.rejection_reasons[1], "missing outcome");
}

TEST(LoadDataset, Errors) {
  TempDir dir;
  EXPECT_THROW(load_dataset(dir / "absent.csv"), DataError);
  const auto f = dir.write("d.csv", "trial,arm,y\n1,0,1\n");
  EXPECT_THROW(load_dataset(f), DataError);
  CsvSchema s;
  s.treat_col = "arm";
  s.covariates = {"nope"};
  EXPECT_THROW(load_dataset(f, s), DataError);
}

TEST(LoadDataset, CustomColumnNames) {
  TempDir dir;
  const auto f = dir.write("d.csv", "study,a,out,z\n3,0,1,0.5\n3,1,2,0.25\n7,1,0,1\n7,0,1,2\n");
  CsvSchema s{"study", "a", "out", {}, MissingCovariates::reject};
  const auto d = load_dataset(f, s);
  EXPECT_EQ(d.trial_ids, (std::vector<int>{3, 7}));
  EXPECT_EQ(d.covariate_names, std::vector<std::string>{"z"});
}

TEST(LoadDataset, RoundTripIsBitIdentical) {
  TempDir dir;
  const auto d = mtcate::testing::make_dataset({7, 5}, 3, 1, [](auto x, int a, int s) {
    return x(0) * 1.0 / 3.0 + a * std::exp(x(1)) + s * 1e-17;
  });
  write_csv(d, dir / "a.csv");
  const auto back = load_dataset(dir / "a.csv");
  EXPECT_EQ(back.covariates, d.covariates);
  EXPECT_EQ(back.outcome, d.outcome);
  EXPECT_EQ(back.trial, d.trial);
  write_csv(back, dir / "b.csv");
  EXPECT_EQ(mtcate::testing::read_file(dir / "a.csv"), mtcate::testing::read_file(dir / "b.csv"));
}

TEST(Validation, AllTreatedTrialIsViolation) {
  auto d = mtcate::testing::make_dataset({10, 10}, 2, 2, [](auto, int, int) { return 0.0; });
  for (int r : d.rows_of(2)) d.treatment[static_cast<std::size_t>(r)] = 1;
  const auto rep = validate_assumptions(d);
  EXPECT_FALSE(rep.passed);
  ASSERT_EQ(rep.violations.size(), 1u);
  EXPECT_EQ(rep.violations[0].trial, 2);
  EXPECT_EQ(rep.violations[0].assumption, 3);
}

TEST(Validation, BalancedTrialsPass) {
  const auto d = mtcate::testing::make_dataset({20, 20}, 2, 3, [](auto, int, int) { return 0.0; });
  ValidationOptions o;
  o.c_threshold = 0.4;
  const auto rep = validate_assumptions(d, o);
  EXPECT_TRUE(rep.violations.empty());
  EXPECT_TRUE(rep.passed);
  for (auto [id, p] : rep.per_trial_propensity) EXPECT_DOUBLE_EQ(p, 0.5);
}

TEST(Validation, ThresholdOutsideBoundsIsViolation) {
  auto d = mtcate::testing::make_dataset({20, 20}, 1, 4, [](auto, int, int) { return 0.0; });
  // Trial 1: 17 of 20 treated.
  const auto rows = d.rows_of(1);
  for (int k = 0; k < 17; ++k) d.treatment[static_cast<std::size_t>(rows[static_cast<std::size_t>(k)])] = 1;
  for (int k = 17; k < 20; ++k) d.treatment[static_cast<std::size_t>(rows[static_cast<std::size_t>(k)])] = 0;
  ValidationOptions o;
  o.c_threshold = 0.2;
  EXPECT_FALSE(validate_assumptions(d, o).passed);
  o.c_threshold = 0.1;
  EXPECT_TRUE(validate_assumptions(d, o).passed);
}

TEST(Validation, IdenticalDistributionsGiveHalfMembership) {
  const auto d = mtcate::testing::make_dataset({1000, 1000}, 3, 5, [](auto, int, int) { return 0.0; });
  const auto rep = validate_assumptions(d);
  EXPECT_TRUE(rep.warnings.empty());
  EXPECT_GT(rep.min_membership_probability, 0.4);
  EXPECT_LT(rep.max_membership_probability, 0.6);
  EXPECT_DOUBLE_EQ(rep.membership_fraction_in_bounds, 1.0);
}

TEST(Validation, SeparatedTrialsWarnButPass) {
  auto d = mtcate::testing::make_dataset({200, 200}, 1, 6, [](auto, int, int) { return 0.0; });
  for (int r : d.rows_of(2)) d.covariates(r, 0) += 8.0;
  const auto rep = validate_assumptions(d);
  EXPECT_TRUE(rep.passed);
  ASSERT_FALSE(rep.warnings.empty());
  EXPECT_EQ(rep.warnings[0].assumption, 4);
}

TEST(Validation, DeterministicAndThresholdChecked) {
  const auto d = mtcate::testing::make_dataset({50, 60, 40}, 2, 7, [](auto, int, int) { return 0.0; });
  const auto a = validate_assumptions(d);
  const auto b = validate_assumptions(d);
  EXPECT_EQ(a.min_membership_probability, b.min_membership_probability);
  EXPECT_EQ(a.max_membership_probability, b.max_membership_probability);
  ValidationOptions o;
  o.c_threshold = 0.5;
  EXPECT_THROW(validate_assumptions(d, o), DataError);
}

TEST(Dataset, InvariantsAreChecked) {
  auto d = mtcate::testing::make_dataset({3, 3}, 1, 8, [](auto, int, int) { return 0.0; });
  d.treatment[0] = 3;
  EXPECT_THROW(d.validate(), DataError);
  d.treatment[0] = 0;
  d.outcome[1] = std::numeric_limits<double>::infinity();
  EXPECT_THROW(d.validate(), DataError);
}

TEST(LoadCovariates, OptionalTrialColumn) {
  TempDir dir;
  const auto f = dir.write("c.csv", "b,a\n1,2\n3,4\n");
  const auto t = load_covariates(f, {"a", "b"}, "trial");
  EXPECT_TRUE(t.trial.empty());
  EXPECT_DOUBLE_EQ(t.covariates(1, 0), 4.0);
  EXPECT_THROW(load_covariates(f, {"a", "c"}, "trial"), DataError);
}
