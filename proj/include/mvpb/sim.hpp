#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mvpb/meta_model.hpp"
#include "mvpb/pb_tests.hpp"
#include "mvpb/rst.hpp"

// Monte-Carlo harness: BRMA data generation, publication-selection models,
// per-cell rejection rates and the Type I error / power sweeps.

namespace mvpb::sim {

enum class Selection {
  kNone,
  kCompleteMissing,  ///< whole studies are suppressed
  kPartialMissing,   ///< each outcome is suppressed independently
};

std::string_view to_string(Selection s);
/// Accepts "none", "complete", "complete_missing", "partial", "partial_missing".
Selection parse_selection(std::string_view text);

struct SimScenario {
  int n_published = 50;
  double tau2 = 0.5;  ///< shared tau_1^2 = tau_2^2
  double rho_w = 0.0;
  double rho_b = 0.0;
  std::array<double, kOutcomes> beta{0.0, 0.0};
  Selection selection = Selection::kNone;
  int replicates = 1000;
  std::uint64_t seed = 1;
  int oversample_factor = 3;

  BrmaParams truth() const;
};

/// Throws ConfigError on invalid values; returns notes for values outside the
/// reference grid (n in {50, 75, 100}, tau2 in [0.5, 1.9], correlations in
/// {-0.5, 0, 0.5}), which are allowed as extensions.
std::vector<std::string> validate(const SimScenario& scenario);

using Rng = std::mt19937_64;

/// Independent stream for replicate r of a run seeded with `seed`.
Rng replicate_stream(std::uint64_t seed, std::uint64_t replicate);

/// Derives a child seed, used to give each grid cell its own stream family.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index);

/// Draws s_ij = |N(0.3, 0.5)|, then theta_i ~ N(beta, Omega) and
/// Y_i ~ N(theta_i, Delta_i).
Study generate_study(const BrmaParams& params, double rho_w, Rng& rng, std::string id = {});

/// Logit of the publication probability of an outcome with deviate `snd`.
double selection_logit(double snd);
double retention_probability(double snd);

/// Publication filter. SND uses the generating tau^2 (selection happens
/// before any estimation). Complete-missing selection scores a study by the
/// deviate of larger magnitude across its outcomes.
std::vector<Study> apply_selection(std::vector<Study> studies, Selection mode,
                                   const BrmaParams& truth, Rng& rng);

/// Test variants reported per simulation cell.
enum class Variant {
  kEgger1, kEgger2, kEggerC, kEggerB,
  kBegg1, kBegg2, kBeggC, kBeggB,
  kTf1, kTf2, kTfC, kTfB,
  kRst,
};

inline constexpr std::size_t kVariantCount = 13;

std::span<const Variant> all_variants();
std::string_view to_string(Variant v);
Variant parse_variant(std::string_view text);

struct RunOptions {
  double alpha = 0.10;
  bool keep_pvalues = false;
  /// 0 picks std::thread::hardware_concurrency().
  int threads = 0;
  int max_pool_retries = 100;
  EggerOptions egger;
  TrimFillOptions trim_fill;
  RstOptions rst;
};

/// p-values of the requested variants on one dataset; nullopt marks a
/// test-level failure.
std::vector<std::optional<double>> evaluate_variants(const MetaDataset& data,
                                                     std::span<const Variant> variants,
                                                     const RunOptions& opts);

/// Published dataset for replicate r: N = oversample * n studies, selection,
/// then a uniform subsample of n. Regenerates the pool up to
/// max_pool_retries times when too few survive, then throws ConvergenceError.
MetaDataset simulate_replicate(const SimScenario& scenario, std::uint64_t replicate,
                               int max_pool_retries = 100);

struct SimCellResult {
  SimScenario scenario;
  double alpha = 0.10;
  std::vector<Variant> variants;
  std::vector<double> rejection_rate;
  std::vector<double> mc_stderr;
  std::vector<int> failures;
  /// [variant][replicate]; NaN marks a failure. Empty unless requested.
  std::vector<std::vector<double>> raw_pvalues;
};

SimCellResult run_cell(const SimScenario& scenario, std::span<const Variant> variants,
                       const RunOptions& opts = {});

/// Binomial standard error sqrt(r (1 - r) / n).
double binomial_stderr(double rate, int n);

enum class Budget { kDesk, kFull };
Budget parse_budget(std::string_view text);

struct Table1Config {
  Budget budget = Budget::kDesk;
  std::uint64_t seed = 20240101;
  double rho_w = 0.5;
  double rho_b = 0.5;
  std::optional<int> replicates;  ///< overrides the budget default
  RunOptions run;
};

/// Null (no selection) rejection rates over the tau2 x n grid: desk mode uses
/// tau2 in {0.5, 1.9}, n in {50, 100} and 500 replicates; full mode the
/// 4 x 3 grid with 5000 replicates.
std::vector<SimCellResult> replicate_table1(const Table1Config& config);

struct PowerConfig {
  Selection selection = Selection::kCompleteMissing;
  std::vector<double> tau2_grid{0.5, 1.1, 1.5, 1.9};
  int n_published = 50;
  double rho_w = 0.5;
  double rho_b = 0.5;
  std::array<double, kOutcomes> beta{0.0, 0.0};
  int replicates = 1000;
  int null_replicates = 1000;
  std::uint64_t seed = 20240102;
  RunOptions run;
};

struct PowerPoint {
  double tau2 = 0.0;
  Variant variant = Variant::kRst;
  double power = 0.0;                ///< raw rejection rate p < alpha
  double size_adjusted_power = 0.0;  ///< rejection rate at the null critical p
  double critical_p = 0.0;
  double null_rate = 0.0;
  double mc_stderr = 0.0;
  int replicates = 0;
  int failures = 0;
};

/// Critical p-value such that at most a fraction alpha of `null_p` lies
/// strictly below it (NaNs ignored).
double size_adjusted_critical(std::vector<double> null_p, double alpha);

/// For each tau2 runs a matched null cell and the selection cell, and reports
/// raw and size-adjusted power per variant.
std::vector<PowerPoint> power_sweep(const PowerConfig& config);

// ---- I/O (sim_io.cpp)

inline constexpr std::string_view kCellSchema = "mvpb-sim-cell/1";
inline constexpr std::string_view kPowerSchema = "mvpb-power/1";

void write_cells_csv(std::ostream& out, std::span<const SimCellResult> cells);
void write_power_csv(std::ostream& out, const PowerConfig& config, std::span<const PowerPoint> points);

/// key = value lines; '#' starts a comment. Keys are the SimScenario field
/// names (n_published, tau2, rho_w, rho_b, beta1, beta2, selection,
/// replicates, seed, oversample_factor). Unknown keys raise ConfigError.
SimScenario parse_scenario(std::istream& in, SimScenario base = {});
void write_scenario(std::ostream& out, const SimScenario& scenario);

}  // namespace mvpb::sim
