#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "mvpb/meta_model.hpp"
#include "mvpb/pb_tests.hpp"
#include "mvpb/rst.hpp"

// Dataset-level test execution behind the `test` subcommand: per-outcome,
// combined-measure and Bonferroni rows for the univariate methods plus the
// joint RST row.

namespace mvpb::cli {

enum class ExitCode : int {
  kOk = 0,
  kIngestion = 2,
  kComputation = 3,
  kConfiguration = 4,
};

ExitCode exit_code_for(ErrorCategory category);

struct MethodSet {
  bool egger = true;
  bool begg = true;
  bool trim_fill = true;
  bool rst = true;
};

/// "egger", "begg", "trimfill", "rst" or "all".
MethodSet parse_methods(const std::vector<std::string>& names);

struct CombineSet {
  bool logdor = false;
  bool bonferroni = false;
};

/// "logdor", "bonferroni" or "none".
CombineSet parse_combine(const std::vector<std::string>& names);

struct TestRequest {
  MethodSet methods;
  CombineSet combine;
  double alpha = 0.10;
  EggerOptions egger;
  TrimFillOptions trim_fill;
  RstOptions rst;
};

struct TestRow {
  std::string test;    ///< e.g. "Egger", "TF", "RST"
  std::string target;  ///< outcome name, "combined", "bonferroni" or "joint"
  std::optional<TestResult> result;
  std::string error;   ///< set when the test could not run
};

std::vector<TestRow> run_tests(const MetaDataset& data, const TestRequest& request);

inline constexpr std::string_view kTestSchema = "mvpb-test/1";

void write_test_csv(std::ostream& out, const std::vector<TestRow>& rows, double alpha);
void print_test_table(std::ostream& out, const std::vector<TestRow>& rows, double alpha);

}  // namespace mvpb::cli
