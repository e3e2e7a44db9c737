#include "mvpb/sim.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <limits>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include "mvpb/distributions.hpp"
#include "mvpb/error.hpp"

namespace mvpb::sim {

std::string_view to_string(Selection s) {
  switch (s) {
    case Selection::kNone: return "none";
    case Selection::kCompleteMissing: return "complete";
    case Selection::kPartialMissing: return "partial";
  }
  return "?";
}

Selection parse_selection(std::string_view text) {
  if (text == "none") return Selection::kNone;
  if (text == "complete" || text == "complete_missing") return Selection::kCompleteMissing;
  if (text == "partial" || text == "partial_missing") return Selection::kPartialMissing;
  throw ConfigError("unknown selection mode '" + std::string(text) + "'");
}

BrmaParams SimScenario::truth() const {
  BrmaParams p;
  p.beta = beta;
  p.tau2 = {tau2, tau2};
  p.rho_b = rho_b;
  return p;
}

std::vector<std::string> validate(const SimScenario& s) {
  if (s.n_published < 3) throw ConfigError("n_published must be >= 3");
  if (!(s.tau2 >= 0.0)) throw ConfigError("tau2 must be >= 0");
  if (!(std::abs(s.rho_w) <= 1.0) || !(std::abs(s.rho_b) <= 1.0)) {
    throw ConfigError("correlations must lie in [-1, 1]");
  }
  if (s.replicates < 1) throw ConfigError("replicates must be >= 1");
  if (s.oversample_factor < 1) throw ConfigError("oversample_factor must be >= 1");

  std::vector<std::string> notes;
  auto on_grid = [](double v, std::initializer_list<double> grid) {
    return std::any_of(grid.begin(), grid.end(), [v](double g) { return std::abs(v - g) < 1e-12; });
  };
  if (!on_grid(s.n_published, {50, 75, 100})) {
    notes.push_back("extension: n = " + std::to_string(s.n_published) + " outside {50, 75, 100}");
  }
  if (s.tau2 < 0.5 || s.tau2 > 1.9) notes.push_back("extension: tau2 outside [0.5, 1.9]");
  if (!on_grid(s.rho_w, {-0.5, 0.0, 0.5})) notes.push_back("extension: rho_w outside {-0.5, 0, 0.5}");
  if (!on_grid(s.rho_b, {-0.5, 0.0, 0.5})) notes.push_back("extension: rho_b outside {-0.5, 0, 0.5}");
  return notes;
}

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
  return splitmix64(splitmix64(seed) ^ splitmix64(index + 0x632be59bd9b4e019ULL));
}

Rng replicate_stream(std::uint64_t seed, std::uint64_t replicate) {
  const std::uint64_t base = derive_seed(seed, replicate);
  std::seed_seq seq{static_cast<std::uint32_t>(base), static_cast<std::uint32_t>(base >> 32),
                    static_cast<std::uint32_t>(replicate), static_cast<std::uint32_t>(replicate >> 32)};
  return Rng(seq);
}

Study generate_study(const BrmaParams& params, double rho_w, Rng& rng, std::string id) {
  std::normal_distribution<double> z(0.0, 1.0);
  Study s;
  s.id = std::move(id);
  std::array<double, kOutcomes> se{};
  for (auto& v : se) {
    do {
      v = std::abs(0.3 + 0.5 * z(rng));
    } while (v < 1e-8);
  }
  const double t1 = std::sqrt(params.tau2[0]), t2 = std::sqrt(params.tau2[1]);
  const double zb1 = z(rng), zb2 = z(rng);
  const double theta1 = params.beta[0] + t1 * zb1;
  const double theta2 =
      params.beta[1] + t2 * (params.rho_b * zb1 + std::sqrt(1.0 - params.rho_b * params.rho_b) * zb2);
  const double zw1 = z(rng), zw2 = z(rng);
  const double y1 = theta1 + se[0] * zw1;
  const double y2 = theta2 + se[1] * (rho_w * zw1 + std::sqrt(1.0 - rho_w * rho_w) * zw2);
  s.y = {y1, y2};
  s.se = {se[0], se[1]};
  s.rho_w = rho_w;
  return s;
}

double selection_logit(double snd) {
  if (snd >= 2.0) return 4.0;
  return -2.5 + 0.1 * snd + 1.5 * snd * snd;
}

double retention_probability(double snd) { return dist::logistic(selection_logit(snd)); }

std::vector<Study> apply_selection(std::vector<Study> studies, Selection mode,
                                   const BrmaParams& truth, Rng& rng) {
  if (mode == Selection::kNone) return studies;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto snd = [&](const Study& s, std::size_t j) {
    return *s.y[j] / std::sqrt(*s.se[j] * *s.se[j] + truth.tau2[j]);
  };
  std::vector<Study> kept;
  kept.reserve(studies.size());
  for (auto& s : studies) {
    if (mode == Selection::kCompleteMissing) {
      double score = 0.0;
      bool first = true;
      for (std::size_t j = 0; j < kOutcomes; ++j) {
        if (!s.has(j)) continue;
        const double d = snd(s, j);
        if (first || std::abs(d) > std::abs(score)) score = d;
        first = false;
      }
      if (u(rng) < retention_probability(score)) kept.push_back(std::move(s));
    } else {
      for (std::size_t j = 0; j < kOutcomes; ++j) {
        if (!s.has(j)) continue;
        if (!(u(rng) < retention_probability(snd(s, j)))) {
          s.y[j].reset();
          s.se[j].reset();
        }
      }
      if (s.observed_count() == 0) continue;
      if (!s.complete()) s.rho_w.reset();
      kept.push_back(std::move(s));
    }
  }
  return kept;
}

// ---------------------------------------------------------------- variants

namespace {

constexpr std::array<Variant, kVariantCount> kAllVariants{
    Variant::kEgger1, Variant::kEgger2, Variant::kEggerC, Variant::kEggerB,
    Variant::kBegg1,  Variant::kBegg2,  Variant::kBeggC,  Variant::kBeggB,
    Variant::kTf1,    Variant::kTf2,    Variant::kTfC,    Variant::kTfB,
    Variant::kRst};

constexpr std::array<std::string_view, kVariantCount> kVariantNames{
    "Egger1", "Egger2", "Egger(C)", "Egger(B)", "Begg1", "Begg2", "Begg(C)",
    "Begg(B)", "TF1",   "TF2",      "TF(C)",    "TF(B)", "RST"};

}  // namespace

std::span<const Variant> all_variants() { return kAllVariants; }

std::string_view to_string(Variant v) { return kVariantNames[static_cast<std::size_t>(v)]; }

Variant parse_variant(std::string_view text) {
  for (std::size_t i = 0; i < kVariantCount; ++i) {
    if (kVariantNames[i] == text) return kAllVariants[i];
  }
  throw ConfigError("unknown test variant '" + std::string(text) + "'");
}

std::vector<std::optional<double>> evaluate_variants(const MetaDataset& data,
                                                     std::span<const Variant> variants,
                                                     const RunOptions& opts) {
  // Each family (per outcome, combined, RST) is computed lazily and at most
  // once; a failure leaves the slot empty.
  enum Family { kEgger, kBegg, kTf };
  std::array<std::array<std::optional<std::optional<double>>, 3>, 3> cache{};  // [family][1,2,C]
  std::optional<std::optional<double>> rst;
  std::optional<std::optional<UniSeries>> combined;
  std::array<std::optional<UniSeries>, kOutcomes> per_outcome;

  auto series_for = [&](int slot) -> std::optional<UniSeries> {
    if (slot < 2) {
      if (!per_outcome[slot]) per_outcome[slot] = outcome_series(data, static_cast<std::size_t>(slot));
      return per_outcome[slot];
    }
    if (!combined) {
      try {
        combined = std::optional<UniSeries>(combine_logdor(data));
      } catch (const Error&) {
        combined = std::optional<UniSeries>();
      }
    }
    return *combined;
  };
  auto run = [&](Family f, int slot) -> std::optional<double> {
    auto& c = cache[f][slot];
    if (c) return *c;
    std::optional<double> p;
    try {
      const auto series = series_for(slot);
      if (series) {
        switch (f) {
          case kEgger: p = egger_test(*series, opts.egger).p_value; break;
          case kBegg: p = begg_test(*series).p_value; break;
          case kTf: p = trim_fill(*series, opts.trim_fill).p_value; break;
        }
      }
    } catch (const Error&) {
      p.reset();
    }
    c = p;
    return p;
  };
  auto bonferroni = [&](Family f) -> std::optional<double> {
    const auto p1 = run(f, 0), p2 = run(f, 1);
    if (!p1 || !p2) return std::nullopt;
    return std::min(1.0, 2.0 * std::min(*p1, *p2));
  };

  std::vector<std::optional<double>> out;
  out.reserve(variants.size());
  for (Variant v : variants) {
    const auto idx = static_cast<int>(v);
    if (v == Variant::kRst) {
      if (!rst) {
        try {
          rst = std::optional<double>(rst_test(data, opts.rst).p_value);
        } catch (const Error&) {
          rst = std::optional<double>();
        }
      }
      out.push_back(*rst);
      continue;
    }
    const auto family = static_cast<Family>(idx / 4);
    const int slot = idx % 4;
    out.push_back(slot == 3 ? bonferroni(family) : run(family, slot));
  }
  return out;
}

MetaDataset simulate_replicate(const SimScenario& scenario, std::uint64_t replicate,
                               int max_pool_retries) {
  Rng rng = replicate_stream(scenario.seed, replicate);
  const BrmaParams truth = scenario.truth();
  const auto n = static_cast<std::size_t>(scenario.n_published);
  const auto pool_size = n * static_cast<std::size_t>(scenario.oversample_factor);
  for (int attempt = 0; attempt <= max_pool_retries; ++attempt) {
    std::vector<Study> pool;
    pool.reserve(pool_size);
    for (std::size_t i = 0; i < pool_size; ++i) {
      pool.push_back(generate_study(truth, scenario.rho_w, rng, "s" + std::to_string(i + 1)));
    }
    std::vector<Study> published = apply_selection(std::move(pool), scenario.selection, truth, rng);
    if (published.size() < n) continue;
    // Uniform subsample of n, kept in generation order.
    std::vector<std::size_t> idx(published.size());
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
      std::swap(idx[i], idx[pick(rng)]);
    }
    idx.resize(n);
    std::sort(idx.begin(), idx.end());
    MetaDataset data;
    data.scale = "logit";
    for (std::size_t i : idx) data.studies.push_back(std::move(published[i]));
    return data;
  }
  throw ConvergenceError("selection left fewer than " + std::to_string(n) +
                         " studies after " + std::to_string(max_pool_retries + 1) + " pools");
}

double binomial_stderr(double rate, int n) {
  return n > 0 ? std::sqrt(rate * (1.0 - rate) / static_cast<double>(n)) : 0.0;
}

SimCellResult run_cell(const SimScenario& scenario, std::span<const Variant> variants,
                       const RunOptions& opts) {
  validate(scenario);
  if (!(opts.alpha > 0.0 && opts.alpha <= 1.0)) throw ConfigError("alpha must lie in (0, 1]");
  const auto reps = static_cast<std::size_t>(scenario.replicates);
  const std::size_t nv = variants.size();
  // p-values indexed [replicate][variant]; each replicate writes its own row,
  // so results do not depend on scheduling.
  std::vector<std::vector<double>> pvals(reps, std::vector<double>(nv));

  auto work = [&](std::size_t r) {
    const MetaDataset data = simulate_replicate(scenario, r, opts.max_pool_retries);
    const auto ps = evaluate_variants(data, variants, opts);
    for (std::size_t v = 0; v < nv; ++v) {
      pvals[r][v] = ps[v].value_or(std::numeric_limits<double>::quiet_NaN());
    }
  };

  unsigned threads = opts.threads > 0 ? static_cast<unsigned>(opts.threads)
                                      : std::max(1u, std::thread::hardware_concurrency());
  threads = std::min<unsigned>(threads, static_cast<unsigned>(reps));
  if (threads <= 1) {
    for (std::size_t r = 0; r < reps; ++r) work(r);
  } else {
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < threads; ++t) {
      pool.emplace_back([&, t] {
        try {
          for (std::size_t r = t; r < reps; r += threads) work(r);
        } catch (...) {
          const std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    if (error) std::rethrow_exception(error);
  }

  SimCellResult res;
  res.scenario = scenario;
  res.alpha = opts.alpha;
  res.variants.assign(variants.begin(), variants.end());
  for (std::size_t v = 0; v < nv; ++v) {
    int rejected = 0, failed = 0;
    for (std::size_t r = 0; r < reps; ++r) {
      const double p = pvals[r][v];
      if (std::isnan(p)) {
        ++failed;
      } else if (p < opts.alpha || opts.alpha >= 1.0) {
        ++rejected;
      }
    }
    const int evaluated = static_cast<int>(reps) - failed;
    const double rate = evaluated > 0 ? static_cast<double>(rejected) / evaluated : 0.0;
    res.rejection_rate.push_back(rate);
    res.mc_stderr.push_back(binomial_stderr(rate, evaluated));
    res.failures.push_back(failed);
  }
  if (opts.keep_pvalues) {
    res.raw_pvalues.assign(nv, std::vector<double>(reps));
    for (std::size_t v = 0; v < nv; ++v) {
      for (std::size_t r = 0; r < reps; ++r) res.raw_pvalues[v][r] = pvals[r][v];
    }
  }
  return res;
}

// ---------------------------------------------------------------- sweeps

Budget parse_budget(std::string_view text) {
  if (text == "desk") return Budget::kDesk;
  if (text == "full") return Budget::kFull;
  throw ConfigError("unknown budget '" + std::string(text) + "' (expected desk or full)");
}

std::vector<SimCellResult> replicate_table1(const Table1Config& config) {
  const bool desk = config.budget == Budget::kDesk;
  const std::vector<double> tau2_grid =
      desk ? std::vector<double>{0.5, 1.9} : std::vector<double>{0.5, 1.1, 1.5, 1.9};
  const std::vector<int> n_grid = desk ? std::vector<int>{50, 100} : std::vector<int>{50, 75, 100};
  const int reps = config.replicates.value_or(desk ? 500 : 5000);

  std::vector<SimCellResult> cells;
  std::uint64_t cell = 0;
  for (double tau2 : tau2_grid) {
    for (int n : n_grid) {
      SimScenario s;
      s.tau2 = tau2;
      s.n_published = n;
      s.rho_w = config.rho_w;
      s.rho_b = config.rho_b;
      s.selection = Selection::kNone;
      s.replicates = reps;
      s.seed = derive_seed(config.seed, cell++);
      cells.push_back(run_cell(s, all_variants(), config.run));
    }
  }
  return cells;
}

double size_adjusted_critical(std::vector<double> null_p, double alpha) {
  null_p.erase(std::remove_if(null_p.begin(), null_p.end(), [](double p) { return std::isnan(p); }),
               null_p.end());
  if (null_p.empty()) return alpha;
  std::sort(null_p.begin(), null_p.end());
  // Rejecting when p < c keeps the empirical null rate at or below alpha when
  // c is the (floor(alpha n) + 1)-th smallest null p-value.
  const auto k = static_cast<std::size_t>(std::floor(alpha * static_cast<double>(null_p.size())));
  if (k >= null_p.size()) return 1.0 + 1e-12;
  return null_p[k];
}

std::vector<PowerPoint> power_sweep(const PowerConfig& config) {
  RunOptions run = config.run;
  run.keep_pvalues = true;
  std::vector<PowerPoint> points;
  std::uint64_t cell = 0;
  for (double tau2 : config.tau2_grid) {
    SimScenario alt;
    alt.tau2 = tau2;
    alt.n_published = config.n_published;
    alt.rho_w = config.rho_w;
    alt.rho_b = config.rho_b;
    alt.beta = config.beta;
    alt.selection = config.selection;
    alt.replicates = config.replicates;
    alt.seed = derive_seed(config.seed, 2 * cell);
    SimScenario null = alt;
    null.selection = Selection::kNone;
    null.replicates = config.null_replicates;
    null.seed = derive_seed(config.seed, 2 * cell + 1);
    ++cell;

    const SimCellResult alt_res = run_cell(alt, all_variants(), run);
    const SimCellResult null_res = run_cell(null, all_variants(), run);
    for (std::size_t v = 0; v < kVariantCount; ++v) {
      PowerPoint pt;
      pt.tau2 = tau2;
      pt.variant = all_variants()[v];
      pt.power = alt_res.rejection_rate[v];
      pt.null_rate = null_res.rejection_rate[v];
      pt.critical_p = size_adjusted_critical(null_res.raw_pvalues[v], run.alpha);
      int rejected = 0, evaluated = 0;
      for (double p : alt_res.raw_pvalues[v]) {
        if (std::isnan(p)) continue;
        ++evaluated;
        if (p < pt.critical_p) ++rejected;
      }
      pt.size_adjusted_power = evaluated > 0 ? static_cast<double>(rejected) / evaluated : 0.0;
      pt.mc_stderr = binomial_stderr(pt.size_adjusted_power, evaluated);
      pt.replicates = config.replicates;
      pt.failures = alt_res.failures[v];
      points.push_back(pt);
    }
  }
  return points;
}

}  // namespace mvpb::sim
