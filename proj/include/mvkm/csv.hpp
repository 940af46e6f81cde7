#pragma once

// Minimal CSV reading: header row, first column holds the subject (or feature) identifier.

#include "mvkm/error.hpp"
#include "mvkm/kernels.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace mvkm {

struct CsvText {
  std::string path;
  std::vector<std::string> header;             // includes the identifier column name
  std::vector<std::vector<std::string>> rows;  // every row has header.size() cells
};

/// Reads a comma-separated file. Double-quoted cells may contain commas; surrounding
/// whitespace and a trailing CR are stripped. Throws data-error on ragged rows or an empty file, io-error when
/// the file cannot be opened.
CsvText read_csv_text(const std::filesystem::path& path);

struct NumericTable {
  std::string path;
  std::vector<std::string> ids;      // first column
  std::vector<std::string> columns;  // remaining header names
  MatrixXd values;                   // ids.size() x columns.size()
};

/// Parses every non-identifier cell as a finite number. Errors report the one-based data row
/// and column. Duplicate identifiers are a data error.
NumericTable read_numeric_csv(const std::filesystem::path& path);

/// Ensures every cell is 0, 1 or 2; throws invalid-genotype naming the row and column.
void validate_genotype_table(const NumericTable& table);

}  // namespace mvkm
