#include "mvpb/commands.hpp"

#include <cstdio>
#include <functional>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "mvpb/error.hpp"

namespace mvpb::cli {

ExitCode exit_code_for(ErrorCategory category) {
  switch (category) {
    case ErrorCategory::kIngestion: return ExitCode::kIngestion;
    case ErrorCategory::kComputation: return ExitCode::kComputation;
    case ErrorCategory::kConfiguration: return ExitCode::kConfiguration;
  }
  return ExitCode::kComputation;
}

MethodSet parse_methods(const std::vector<std::string>& names) {
  if (names.empty()) return {};
  MethodSet m{false, false, false, false};
  for (const auto& n : names) {
    if (n == "all") {
      m = MethodSet{};
    } else if (n == "egger") {
      m.egger = true;
    } else if (n == "begg") {
      m.begg = true;
    } else if (n == "trimfill") {
      m.trim_fill = true;
    } else if (n == "rst") {
      m.rst = true;
    } else {
      throw ConfigError("unknown method '" + n + "' (egger, begg, trimfill, rst, all)");
    }
  }
  return m;
}

CombineSet parse_combine(const std::vector<std::string>& names) {
  CombineSet c;
  for (const auto& n : names) {
    if (n == "logdor") {
      c.logdor = true;
    } else if (n == "bonferroni") {
      c.bonferroni = true;
    } else if (n != "none") {
      throw ConfigError("unknown combine mode '" + n + "' (logdor, bonferroni, none)");
    }
  }
  return c;
}

namespace {

std::string hint_for(const std::string& target) {
  if (target == "combined") {
    return " [hint: the combined measure needs studies reporting both outcomes with rho_w;"
           " try --combine bonferroni or --method rst]";
  }
  if (target == "bonferroni") return " [hint: both per-outcome tests must succeed]";
  if (target == "joint") {
    return " [hint: RST needs each reported outcome in >= 2 studies with varying precision]";
  }
  return " [hint: univariate tests need >= 3 studies reporting this outcome with varying se]";
}

TestResult to_test_result(const RstResult& r) {
  TestResult t;
  t.method = Method::kRst;
  t.statistic = r.statistic;
  t.reference = Reference::kChiSquared;
  t.df = r.df;
  t.p_value = r.p_value;
  t.detail = {{"b1", r.b_profiled[0]},
              {"b2", r.b_profiled[1]},
              {"tau2_1", r.plug_in.tau2[0]},
              {"tau2_2", r.plug_in.tau2[1]},
              {"rho_b", r.plug_in.rho_b},
              {"m", static_cast<double>(r.studies)}};
  for (Eigen::Index k = 0; k < r.score_at_null.size(); ++k) {
    t.detail.emplace_back("score" + std::to_string(k + 1), r.score_at_null[k]);
  }
  return t;
}

}  // namespace

std::vector<TestRow> run_tests(const MetaDataset& data, const TestRequest& req) {
  std::vector<TestRow> rows;
  auto attempt = [&](std::string test, std::string target, const std::function<TestResult()>& fn) {
    TestRow row{std::move(test), std::move(target), std::nullopt, {}};
    try {
      row.result = fn();
    } catch (const Error& e) {
      row.error = e.what() + hint_for(row.target);
    }
    rows.push_back(std::move(row));
    return rows.back().result;
  };

  std::optional<UniSeries> combined;
  std::string combined_error;
  std::size_t dropped = 0;
  if (req.combine.logdor) {
    try {
      combined = combine_logdor(data, &dropped);
    } catch (const Error& e) {
      combined_error = e.what();
    }
  }

  auto univariate = [&](std::string name, const std::function<TestResult(const UniSeries&)>& fn) {
    std::array<std::optional<TestResult>, kOutcomes> per;
    for (std::size_t j = 0; j < kOutcomes; ++j) {
      per[j] = attempt(name, data.outcome_names[j], [&] { return fn(outcome_series(data, j)); });
    }
    if (req.combine.logdor) {
      attempt(name, "combined", [&]() -> TestResult {
        if (!combined) throw DataError(combined_error);
        TestResult r = fn(*combined);
        if (dropped > 0) {
          r.detail.emplace_back("dropped_partial", static_cast<double>(dropped));
          r.notes.push_back(std::to_string(dropped) + " partially reported studies excluded");
        }
        return r;
      });
    }
    if (req.combine.bonferroni) {
      attempt(name, "bonferroni", [&]() -> TestResult {
        if (!per[0] || !per[1]) throw DataError("a per-outcome test failed");
        return bonferroni_combine(*per[0], *per[1]);
      });
    }
  };

  if (req.methods.egger) {
    univariate("Egger", [&](const UniSeries& s) { return egger_test(s, req.egger); });
  }
  if (req.methods.begg) univariate("Begg", [](const UniSeries& s) { return begg_test(s); });
  if (req.methods.trim_fill) {
    univariate("TF", [&](const UniSeries& s) { return trim_fill(s, req.trim_fill); });
  }
  if (req.methods.rst) {
    attempt("RST", "joint", [&] { return to_test_result(rst_test(data, req.rst)); });
  }
  return rows;
}

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

std::string csv_quote(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) {
    if (c == '"') q += '"';
    q += c;
  }
  return q + "\"";
}

std::string detail_string(const TestResult& r) {
  std::string out;
  for (const auto& [k, v] : r.detail) {
    if (!out.empty()) out += ';';
    out += k + "=" + fmt(v);
  }
  for (const auto& n : r.notes) {
    if (!out.empty()) out += ';';
    out += "note=" + n;
  }
  return out;
}

}  // namespace

void write_test_csv(std::ostream& out, const std::vector<TestRow>& rows, double alpha) {
  out << "# schema: " << kTestSchema << "\n";
  out << "test,target,statistic,reference,df,p_value,alpha,reject,detail,error\n";
  for (const auto& row : rows) {
    out << row.test << ',' << csv_quote(row.target) << ',';
    if (row.result) {
      const auto& r = *row.result;
      out << fmt(r.statistic) << ',' << to_string(r.reference) << ','
          << (r.df ? fmt(*r.df) : std::string()) << ',' << fmt(r.p_value) << ',' << fmt(alpha)
          << ',' << (r.p_value < alpha ? 1 : 0) << ',' << csv_quote(detail_string(r)) << ",\n";
    } else {
      out << ",,,," << fmt(alpha) << ",,," << csv_quote(row.error) << '\n';
    }
  }
}

void print_test_table(std::ostream& out, const std::vector<TestRow>& rows, double alpha) {
  out << std::left << std::setw(7) << "test" << std::setw(14) << "target" << std::setw(12)
      << "statistic" << std::setw(10) << "p" << "decision (alpha = " << fmt(alpha) << ")\n";
  for (const auto& row : rows) {
    out << std::setw(7) << row.test << std::setw(14) << row.target;
    if (row.result) {
      out << std::setw(12) << fmt(row.result->statistic) << std::setw(10)
          << fmt(row.result->p_value) << (row.result->p_value < alpha ? "asymmetry" : "-") << '\n';
    } else {
      out << "error: " << row.error << '\n';
    }
  }
}

}  // namespace mvpb::cli
