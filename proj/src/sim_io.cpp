#include <charconv>
#include <cstdio>
#include <istream>
#include <ostream>
#include <string>

#include "mvpb/error.hpp"
#include "mvpb/sim.hpp"

namespace mvpb::sim {

namespace {

std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

std::string rate(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

std::string exact(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("scenario key '" + key + "': '" + v + "' is not a number");
  }
}

long long to_integer(const std::string& key, const std::string& v) {
  long long out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError("scenario key '" + key + "': '" + v + "' is not an integer");
  }
  return out;
}

}  // namespace

void write_cells_csv(std::ostream& out, std::span<const SimCellResult> cells) {
  out << "# schema: " << kCellSchema << "\n";
  out << "tau2,n,rho_w,rho_b,beta1,beta2,selection,seed,test,alpha,rejection_rate,mc_stderr,"
         "replicates,failures\n";
  for (const auto& c : cells) {
    const auto& s = c.scenario;
    for (std::size_t v = 0; v < c.variants.size(); ++v) {
      out << num(s.tau2) << ',' << s.n_published << ',' << num(s.rho_w) << ',' << num(s.rho_b) << ','
          << num(s.beta[0]) << ',' << num(s.beta[1]) << ',' << to_string(s.selection) << ','
          << s.seed << ',' << to_string(c.variants[v]) << ',' << num(c.alpha) << ','
          << rate(c.rejection_rate[v]) << ',' << rate(c.mc_stderr[v]) << ',' << s.replicates << ','
          << c.failures[v] << '\n';
    }
  }
}

void write_power_csv(std::ostream& out, const PowerConfig& config, std::span<const PowerPoint> points) {
  out << "# schema: " << kPowerSchema << "\n";
  out << "selection,tau2,n,rho_w,rho_b,beta1,beta2,test,alpha,power,size_adjusted_power,"
         "critical_p,null_rate,mc_stderr,replicates,failures\n";
  for (const auto& p : points) {
    out << to_string(config.selection) << ',' << num(p.tau2) << ',' << config.n_published << ','
        << num(config.rho_w) << ',' << num(config.rho_b) << ',' << num(config.beta[0]) << ','
        << num(config.beta[1]) << ',' << to_string(p.variant) << ',' << num(config.run.alpha) << ','
        << rate(p.power) << ',' << rate(p.size_adjusted_power) << ',' << num(p.critical_p) << ','
        << rate(p.null_rate) << ',' << rate(p.mc_stderr) << ',' << p.replicates << ','
        << p.failures << '\n';
  }
}

SimScenario parse_scenario(std::istream& in, SimScenario s) {
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("scenario line " + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = trim(std::string_view(t).substr(0, eq));
    const std::string val = trim(std::string_view(t).substr(eq + 1));
    if (key == "n_published" || key == "n") {
      s.n_published = static_cast<int>(to_integer(key, val));
    } else if (key == "tau2") {
      s.tau2 = to_double(key, val);
    } else if (key == "rho_w") {
      s.rho_w = to_double(key, val);
    } else if (key == "rho_b") {
      s.rho_b = to_double(key, val);
    } else if (key == "beta1") {
      s.beta[0] = to_double(key, val);
    } else if (key == "beta2") {
      s.beta[1] = to_double(key, val);
    } else if (key == "selection") {
      s.selection = parse_selection(val);
    } else if (key == "replicates") {
      s.replicates = static_cast<int>(to_integer(key, val));
    } else if (key == "seed") {
      std::uint64_t v = 0;
      const auto [ptr, ec] = std::from_chars(val.data(), val.data() + val.size(), v);
      if (ec != std::errc() || ptr != val.data() + val.size()) {
        throw ConfigError("scenario key 'seed': '" + val + "' is not a non-negative integer");
      }
      s.seed = v;
    } else if (key == "oversample_factor") {
      s.oversample_factor = static_cast<int>(to_integer(key, val));
    } else {
      throw ConfigError("scenario line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    }
  }
  validate(s);
  return s;
}

void write_scenario(std::ostream& out, const SimScenario& s) {
  out << "n_published = " << s.n_published << "\n"
      << "tau2 = " << exact(s.tau2) << "\n"
      << "rho_w = " << exact(s.rho_w) << "\n"
      << "rho_b = " << exact(s.rho_b) << "\n"
      << "beta1 = " << exact(s.beta[0]) << "\n"
      << "beta2 = " << exact(s.beta[1]) << "\n"
      << "selection = " << to_string(s.selection) << "\n"
      << "replicates = " << s.replicates << "\n"
      << "seed = " << s.seed << "\n"
      << "oversample_factor = " << s.oversample_factor << "\n";
}

}  // namespace mvpb::sim
