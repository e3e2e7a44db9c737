// mvpb: publication-bias tests for bivariate meta-analysis and the
// Monte-Carlo replication harness.

#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>

#include "CLI11.hpp"
#include "mvpb/commands.hpp"
#include "mvpb/dataset_io.hpp"
#include "mvpb/error.hpp"
#include "mvpb/sim.hpp"

namespace {

using mvpb::cli::ExitCode;

// Writes to --out when given, stdout otherwise.
class Output {
 public:
  explicit Output(const std::string& path) {
    if (path.empty() || path == "-") return;
    file_ = std::make_unique<std::ofstream>(path, std::ios::binary);
    if (!*file_) throw mvpb::ConfigError("cannot open output file '" + path + "'");
  }
  std::ostream& stream() { return file_ ? *file_ : std::cout; }
  bool to_stdout() const { return !file_; }

 private:
  std::unique_ptr<std::ofstream> file_;
};

struct TestArgs {
  mvpb::IngestSpec ingest;
  std::vector<std::string> methods{"all"};
  std::vector<std::string> combine{"none"};
  std::string rho_default;
  double alpha = 0.10;
  bool weighted = false;
  std::string egger_variance = "re";
  std::string estimator = "L0";
  std::string tf_test = "R0";
  std::string side = "auto";
  std::string out;
};

int cmd_test(const TestArgs& a) {
  mvpb::IngestSpec spec = a.ingest;
  if (!a.rho_default.empty()) spec.default_rho_w = std::stod(a.rho_default);
  const mvpb::IngestResult in = mvpb::ingest(spec);
  for (const auto& d : in.rejected) {
    std::cerr << "rejected line " << d.line << " (study '" << d.study_id << "'): " << d.rule << "\n";
  }
  if (in.imputed_rho_w > 0) {
    std::cerr << "imputed rho_w for " << in.imputed_rho_w << " studies\n";
  }

  mvpb::cli::TestRequest req;
  req.methods = mvpb::cli::parse_methods(a.methods);
  req.combine = mvpb::cli::parse_combine(a.combine);
  req.alpha = a.alpha;
  if (!(req.alpha > 0.0 && req.alpha < 1.0)) throw mvpb::ConfigError("--alpha must lie in (0, 1)");
  req.egger.weighting =
      a.weighted ? mvpb::EggerWeighting::kInverseVariance : mvpb::EggerWeighting::kNone;
  if (a.egger_variance == "re") {
    req.egger.variance = mvpb::EggerVariance::kRandomEffects;
  } else if (a.egger_variance == "within") {
    req.egger.variance = mvpb::EggerVariance::kWithinStudy;
  } else {
    throw mvpb::ConfigError("--egger-variance must be re or within");
  }
  auto estimator = [](const std::string& name, const char* flag) {
    if (name == "L0") return mvpb::TrimFillEstimator::kL0;
    if (name == "R0") return mvpb::TrimFillEstimator::kR0;
    throw mvpb::ConfigError(std::string(flag) + " must be L0 or R0");
  };
  req.trim_fill.estimator = estimator(a.estimator, "--estimator");
  req.trim_fill.test_estimator = estimator(a.tf_test, "--tf-test");
  if (a.side == "left") {
    req.trim_fill.side = mvpb::TrimFillSide::kLeft;
  } else if (a.side == "right") {
    req.trim_fill.side = mvpb::TrimFillSide::kRight;
  } else if (a.side == "auto") {
    req.trim_fill.side = mvpb::TrimFillSide::kAuto;
  } else {
    throw mvpb::ConfigError("--side must be left, right or auto");
  }

  const auto rows = mvpb::cli::run_tests(in.data, req);
  mvpb::cli::print_test_table(std::cerr, rows, req.alpha);
  Output out(a.out);
  mvpb::cli::write_test_csv(out.stream(), rows, req.alpha);
  for (const auto& r : rows) {
    if (!r.result) return static_cast<int>(ExitCode::kComputation);
  }
  return 0;
}

struct SimArgs {
  std::string config;
  mvpb::sim::SimScenario scenario;
  std::string selection = "none";
  std::vector<std::string> tests;
  double alpha = 0.10;
  int threads = 0;
  std::string out;
};

int cmd_simulate(SimArgs a, const CLI::App& app) {
  mvpb::sim::SimScenario s = a.scenario;
  s.selection = mvpb::sim::parse_selection(a.selection);
  if (!a.config.empty()) {
    std::ifstream in(a.config);
    if (!in) throw mvpb::ConfigError("cannot open scenario file '" + a.config + "'");
    mvpb::sim::SimScenario from_file = mvpb::sim::parse_scenario(in);
    // Explicit flags win over the file.
    if (app.count("--tau2") == 0) s.tau2 = from_file.tau2;
    if (app.count("--n") == 0) s.n_published = from_file.n_published;
    if (app.count("--rho-w") == 0) s.rho_w = from_file.rho_w;
    if (app.count("--rho-b") == 0) s.rho_b = from_file.rho_b;
    if (app.count("--beta1") == 0) s.beta[0] = from_file.beta[0];
    if (app.count("--beta2") == 0) s.beta[1] = from_file.beta[1];
    if (app.count("--selection") == 0) s.selection = from_file.selection;
    if (app.count("--reps") == 0) s.replicates = from_file.replicates;
    if (app.count("--seed") == 0) s.seed = from_file.seed;
    if (app.count("--oversample") == 0) s.oversample_factor = from_file.oversample_factor;
  }
  for (const auto& note : mvpb::sim::validate(s)) std::cerr << note << "\n";

  std::vector<mvpb::sim::Variant> variants;
  for (const auto& t : a.tests) variants.push_back(mvpb::sim::parse_variant(t));
  if (variants.empty()) {
    variants.assign(mvpb::sim::all_variants().begin(), mvpb::sim::all_variants().end());
  }
  mvpb::sim::RunOptions run;
  run.alpha = a.alpha;
  run.threads = a.threads;
  const mvpb::sim::SimCellResult cell = mvpb::sim::run_cell(s, variants, run);
  Output out(a.out);
  mvpb::sim::write_cells_csv(out.stream(), std::span(&cell, 1));
  return 0;
}

struct ReplicateArgs {
  std::string mode;
  std::string budget = "desk";
  std::uint64_t seed = 20240101;
  std::optional<int> reps;
  double rho_w = 0.5;
  double rho_b = 0.5;
  double alpha = 0.10;
  std::string selection = "complete";
  int n = 50;
  std::vector<double> tau2{0.5, 1.1, 1.5, 1.9};
  double beta = 0.0;
  int threads = 0;
  std::string out;
};

int cmd_replicate(const ReplicateArgs& a) {
  mvpb::sim::RunOptions run;
  run.alpha = a.alpha;
  run.threads = a.threads;
  Output out(a.out);
  if (a.mode == "table1") {
    mvpb::sim::Table1Config cfg;
    cfg.budget = mvpb::sim::parse_budget(a.budget);
    cfg.seed = a.seed;
    cfg.rho_w = a.rho_w;
    cfg.rho_b = a.rho_b;
    cfg.replicates = a.reps;
    cfg.run = run;
    const auto cells = mvpb::sim::replicate_table1(cfg);
    mvpb::sim::write_cells_csv(out.stream(), cells);
    return 0;
  }
  if (a.mode == "power") {
    mvpb::sim::PowerConfig cfg;
    cfg.selection = mvpb::sim::parse_selection(a.selection);
    cfg.tau2_grid = a.tau2;
    cfg.n_published = a.n;
    cfg.rho_w = a.rho_w;
    cfg.rho_b = a.rho_b;
    cfg.beta = {a.beta, a.beta};
    const bool desk = mvpb::sim::parse_budget(a.budget) == mvpb::sim::Budget::kDesk;
    cfg.replicates = a.reps.value_or(desk ? 200 : 1000);
    cfg.null_replicates = cfg.replicates;
    cfg.seed = a.seed;
    cfg.run = run;
    const auto points = mvpb::sim::power_sweep(cfg);
    mvpb::sim::write_power_csv(out.stream(), cfg, points);
    return 0;
  }
  throw mvpb::ConfigError("replicate mode must be table1 or power");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Publication-bias tests for bivariate random-effects meta-analysis"};
  app.require_subcommand(1);

  TestArgs targs;
  auto* test = app.add_subcommand("test", "Run publication-bias tests on a study-level CSV");
  test->add_option("--input,-i", targs.ingest.path, "Input CSV")->required();
  test->add_option("--method", targs.methods, "egger|begg|trimfill|rst|all (repeatable)")
      ->delimiter(',');
  test->add_option("--combine", targs.combine, "logdor|bonferroni|none (repeatable)")->delimiter(',');
  test->add_option("--alpha", targs.alpha, "Significance level")->capture_default_str();
  test->add_option("--default-rho-w", targs.rho_default,
                   "Within-study correlation imputed for complete rows lacking one");
  test->add_option("--missing", targs.ingest.missing_token, "Extra missing-value token");
  test->add_option("--scale", targs.ingest.scale, "Effect scale declaration (e.g. logit)");
  test->add_option("--col-id", targs.ingest.columns.id, "Study id column")->capture_default_str();
  test->add_option("--col-y1", targs.ingest.columns.y1)->capture_default_str();
  test->add_option("--col-se1", targs.ingest.columns.se1)->capture_default_str();
  test->add_option("--col-y2", targs.ingest.columns.y2)->capture_default_str();
  test->add_option("--col-se2", targs.ingest.columns.se2)->capture_default_str();
  test->add_option("--col-rho-w", targs.ingest.columns.rho_w)->capture_default_str();
  test->add_flag("--egger-weighted", targs.weighted,
                 "Weight the Egger regression by the inverse study variance");
  test->add_option("--egger-variance", targs.egger_variance,
                   "Standardize by se^2 + tau^2 (re) or se^2 alone (within)")
      ->capture_default_str();
  test->add_option("--estimator", targs.estimator, "Trim-and-fill estimator L0|R0")->capture_default_str();
  test->add_option("--tf-test", targs.tf_test, "Estimator whose null gives the trim-and-fill p-value")
      ->capture_default_str();
  test->add_option("--side", targs.side, "Trim-and-fill side left|right|auto")->capture_default_str();
  test->add_option("--out,-o", targs.out, "Result CSV (default stdout)");

  SimArgs sargs;
  auto* simulate = app.add_subcommand("simulate", "Run one simulation cell");
  simulate->add_option("--config", sargs.config, "Scenario file (key = value)");
  simulate->add_option("--tau2", sargs.scenario.tau2)->capture_default_str();
  simulate->add_option("--n", sargs.scenario.n_published, "Published studies per meta-analysis")
      ->capture_default_str();
  simulate->add_option("--reps", sargs.scenario.replicates)->capture_default_str();
  simulate->add_option("--rho-w", sargs.scenario.rho_w)->capture_default_str();
  simulate->add_option("--rho-b", sargs.scenario.rho_b)->capture_default_str();
  simulate->add_option("--beta1", sargs.scenario.beta[0])->capture_default_str();
  simulate->add_option("--beta2", sargs.scenario.beta[1])->capture_default_str();
  simulate->add_option("--selection", sargs.selection, "none|complete|partial")->capture_default_str();
  simulate->add_option("--seed", sargs.scenario.seed)->capture_default_str();
  simulate->add_option("--oversample", sargs.scenario.oversample_factor)->capture_default_str();
  simulate->add_option("--tests", sargs.tests, "Variants, e.g. RST,Egger(C) (default all)")
      ->delimiter(',');
  simulate->add_option("--alpha", sargs.alpha)->capture_default_str();
  simulate->add_option("--threads", sargs.threads, "Worker threads (0 = all cores)");
  simulate->add_option("--out,-o", sargs.out, "Result CSV (default stdout)");

  ReplicateArgs rargs;
  auto* replicate = app.add_subcommand("replicate", "Type I error table or power sweep");
  replicate->add_option("mode", rargs.mode, "table1 | power")->required();
  replicate->add_option("--budget", rargs.budget, "desk|full")->capture_default_str();
  replicate->add_option("--seed", rargs.seed)->capture_default_str();
  replicate->add_option("--reps", rargs.reps, "Override replicate count");
  replicate->add_option("--rho-w", rargs.rho_w)->capture_default_str();
  replicate->add_option("--rho-b", rargs.rho_b)->capture_default_str();
  replicate->add_option("--alpha", rargs.alpha)->capture_default_str();
  replicate->add_option("--selection", rargs.selection, "power mode: complete|partial|none")
      ->capture_default_str();
  replicate->add_option("--n", rargs.n, "power mode: published studies")->capture_default_str();
  replicate->add_option("--tau2", rargs.tau2, "power mode: tau2 grid")->delimiter(',');
  replicate->add_option("--beta", rargs.beta, "power mode: true effect for both outcomes")
      ->capture_default_str();
  replicate->add_option("--threads", rargs.threads, "Worker threads (0 = all cores)");
  replicate->add_option("--out,-o", rargs.out, "Result CSV (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return static_cast<int>(ExitCode::kConfiguration);
  }

  try {
    if (*test) return cmd_test(targs);
    if (*simulate) return cmd_simulate(sargs, *simulate);
    if (*replicate) return cmd_replicate(rargs);
  } catch (const mvpb::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(mvpb::cli::exit_code_for(e.category()));
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: invalid value: " << e.what() << "\n";
    return static_cast<int>(ExitCode::kConfiguration);
  }
  return 0;
}
