#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "mvpb/meta_model.hpp"

// CSV ingestion of study-level data and the canonical writer used for
// fixtures.

namespace mvpb {

struct ColumnMap {
  std::string id = "id";
  std::string y1 = "y1";
  std::string se1 = "se1";
  std::string y2 = "y2";
  std::string se2 = "se2";
  std::string rho_w = "rho_w";  ///< optional column
};

struct IngestSpec {
  std::filesystem::path path;
  ColumnMap columns;
  std::string missing_token;  ///< in addition to the empty field
  std::string scale;          ///< effect-scale declaration, e.g. "logit"
  /// Imputed for complete rows without a within-study correlation. Without
  /// it such rows are rejected.
  std::optional<double> default_rho_w;
};

struct RowDiagnostic {
  std::size_t line = 0;  ///< 1-based line number in the file
  std::string study_id;
  std::string rule;
};

struct IngestResult {
  MetaDataset data;
  std::vector<RowDiagnostic> rejected;
  std::size_t imputed_rho_w = 0;
};

inline constexpr std::string_view kDatasetSchema = "mvpb-dataset/1";

/// Reads from a stream; `spec.path` is only used in messages. Throws
/// DataError on schema mismatch or when no valid rows remain.
IngestResult ingest(std::istream& in, const IngestSpec& spec);

/// Throws DataError when the file cannot be opened.
IngestResult ingest(const IngestSpec& spec);

/// Writes the canonical column layout (id,y1,se1,y2,se2,rho_w) with
/// round-trip precision; absent values are written as empty fields.
void write_dataset_csv(std::ostream& out, const MetaDataset& data);

/// Splits one CSV record; handles double-quoted fields.
std::vector<std::string> split_csv_line(std::string_view line);

}  // namespace mvpb
