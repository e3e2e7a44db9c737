#include "mvpb/dataset_io.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>

#include "mvpb/error.hpp"

namespace mvpb {

std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  fields.push_back(std::move(cur));
  return fields;
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

struct RowError {
  std::string rule;
};

}  // namespace

IngestResult ingest(std::istream& in, const IngestSpec& spec) {
  const std::string where = spec.path.empty() ? std::string("<input>") : spec.path.string();
  std::string line;
  std::size_t lineno = 0;
  std::vector<std::string> header;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t.front() == '#') continue;
    header = split_csv_line(t);
    break;
  }
  if (header.empty()) throw DataError(where + ": no header row");

  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < header.size(); ++i) index[trim(header[i])] = i;
  const auto& cm = spec.columns;
  auto column = [&](const std::string& name, bool required) -> std::optional<std::size_t> {
    const auto it = index.find(name);
    if (it != index.end()) return it->second;
    if (required) throw DataError(where + ": missing column '" + name + "'");
    return std::nullopt;
  };
  const std::size_t c_id = *column(cm.id, true);
  const std::array<std::size_t, kOutcomes> c_y{*column(cm.y1, true), *column(cm.y2, true)};
  const std::array<std::size_t, kOutcomes> c_se{*column(cm.se1, true), *column(cm.se2, true)};
  const std::optional<std::size_t> c_rho = column(cm.rho_w, false);

  IngestResult result;
  result.data.scale = spec.scale;
  result.data.outcome_names = {cm.y1, cm.y2};

  auto is_missing = [&](const std::string& f) {
    return f.empty() || (!spec.missing_token.empty() && f == spec.missing_token);
  };
  auto parse = [&](const std::string& f, const std::string& name) -> std::optional<double> {
    if (is_missing(f)) return std::nullopt;
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(f, &used);
    } catch (const std::exception&) {
      throw RowError{"field " + name + " ('" + f + "') is not a number"};
    }
    if (used != f.size() || !std::isfinite(v)) {
      throw RowError{"field " + name + " ('" + f + "') is not a finite number"};
    }
    return v;
  };

  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t.front() == '#') continue;
    std::vector<std::string> fields = split_csv_line(t);
    for (auto& f : fields) f = trim(f);
    const std::string id = c_id < fields.size() ? fields[c_id] : std::string();
    try {
      if (fields.size() != header.size()) {
        throw RowError{"expected " + std::to_string(header.size()) + " fields, found " +
                       std::to_string(fields.size())};
      }
      if (id.empty()) throw RowError{"study id is empty"};
      Study s;
      s.id = id;
      for (std::size_t j = 0; j < kOutcomes; ++j) {
        const std::string yn = j == 0 ? cm.y1 : cm.y2;
        const std::string sn = j == 0 ? cm.se1 : cm.se2;
        s.y[j] = parse(fields[c_y[j]], yn);
        s.se[j] = parse(fields[c_se[j]], sn);
        if (s.y[j].has_value() != s.se[j].has_value()) {
          throw RowError{yn + " and " + sn + " must be both present or both missing"};
        }
        if (s.se[j] && !(*s.se[j] > 0.0)) throw RowError{sn + " must be positive"};
      }
      if (c_rho) s.rho_w = parse(fields[*c_rho], cm.rho_w);
      if (s.rho_w && !(*s.rho_w >= -1.0 && *s.rho_w <= 1.0)) {
        throw RowError{cm.rho_w + " must lie in [-1, 1]"};
      }
      if (s.observed_count() == 0) throw RowError{"no outcome reported"};
      if (s.complete() && !s.rho_w) {
        if (!spec.default_rho_w) {
          throw RowError{"both outcomes reported but " + cm.rho_w +
                         " is missing (pass an explicit default to impute)"};
        }
        s.rho_w = spec.default_rho_w;
        ++result.imputed_rho_w;
      }
      if (!s.complete()) s.rho_w.reset();
      result.data.studies.push_back(std::move(s));
    } catch (const RowError& e) {
      result.rejected.push_back({lineno, id, e.rule});
    }
  }
  if (result.data.studies.empty()) {
    throw DataError(where + ": no valid studies after validation (" +
                    std::to_string(result.rejected.size()) + " rows rejected)");
  }
  return result;
}

IngestResult ingest(const IngestSpec& spec) {
  std::ifstream in(spec.path);
  if (!in) throw DataError("cannot open '" + spec.path.string() + "'");
  return ingest(in, spec);
}

void write_dataset_csv(std::ostream& out, const MetaDataset& data) {
  auto num = [](const std::optional<double>& v) -> std::string {
    if (!v) return {};
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", *v);
    return buf;
  };
  auto quote = [](const std::string& s) {
    if (s.find_first_of(",\"") == std::string::npos) return s;
    std::string q = "\"";
    for (char c : s) {
      if (c == '"') q += '"';
      q += c;
    }
    return q + "\"";
  };
  out << "# schema: " << kDatasetSchema << "\n";
  out << "id,y1,se1,y2,se2,rho_w\n";
  for (const auto& s : data.studies) {
    out << quote(s.id) << ',' << num(s.y[0]) << ',' << num(s.se[0]) << ',' << num(s.y[1]) << ','
        << num(s.se[1]) << ',' << num(s.complete() ? s.rho_w : std::nullopt) << '\n';
  }
}

}  // namespace mvpb
