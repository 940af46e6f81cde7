#include "mvkm/csv.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <unordered_set>

namespace mvkm {

namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      cells.push_back(trim(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  cells.push_back(trim(cur));
  return cells;
}

std::string where(const std::string& path, std::size_t row, std::size_t col) {
  return path + " row " + std::to_string(row) + " column " + std::to_string(col);
}

}  // namespace

CsvText read_csv_text(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::io_error, "cannot open " + path.string());
  CsvText out;
  out.path = path.string();
  std::string line;
  bool have_header = false;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line_no == 1 && line.starts_with("\xEF\xBB\xBF")) line.erase(0, 3);
    if (trim(line).empty()) continue;
    auto cells = split_line(line);
    if (!have_header) {
      out.header = std::move(cells);
      have_header = true;
      continue;
    }
    if (cells.size() != out.header.size()) {
      throw Error(ErrorCode::data_error, out.path + " line " + std::to_string(line_no) + " has " +
                                             std::to_string(cells.size()) + " cells, header has " +
                                             std::to_string(out.header.size()));
    }
    out.rows.push_back(std::move(cells));
  }
  if (!have_header) throw Error(ErrorCode::data_error, out.path + " is empty");
  if (out.header.size() < 2) throw Error(ErrorCode::data_error, out.path + " needs an id column and data");
  return out;
}

NumericTable read_numeric_csv(const std::filesystem::path& path) {
  const CsvText text = read_csv_text(path);
  NumericTable out;
  out.path = text.path;
  out.columns.assign(text.header.begin() + 1, text.header.end());
  out.values.resize(static_cast<Eigen::Index>(text.rows.size()), static_cast<Eigen::Index>(out.columns.size()));
  std::unordered_set<std::string> seen;
  for (std::size_t r = 0; r < text.rows.size(); ++r) {
    const auto& row = text.rows[r];
    if (row[0].empty()) throw Error(ErrorCode::data_error, where(out.path, r + 1, 1) + ": empty identifier");
    if (!seen.insert(row[0]).second) {
      throw Error(ErrorCode::data_error, out.path + ": duplicate subject id '" + row[0] + "'");
    }
    out.ids.push_back(row[0]);
    for (std::size_t c = 1; c < row.size(); ++c) {
      const std::string& cell = row[c];
      double v = 0.0;
      const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (cell.empty() || ec != std::errc() || ptr != cell.data() + cell.size() || !std::isfinite(v)) {
        throw Error(ErrorCode::data_error,
                    where(out.path, r + 1, c + 1) + ": non-numeric value '" + cell + "'");
      }
      out.values(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c - 1)) = v;
    }
  }
  return out;
}

void validate_genotype_table(const NumericTable& table) {
  for (Eigen::Index r = 0; r < table.values.rows(); ++r) {
    for (Eigen::Index c = 0; c < table.values.cols(); ++c) {
      const double v = table.values(r, c);
      if (v != 0.0 && v != 1.0 && v != 2.0) {
        throw Error(ErrorCode::invalid_genotype,
                    where(table.path, static_cast<std::size_t>(r) + 1, static_cast<std::size_t>(c) + 2) +
                        " ('" + table.columns[static_cast<std::size_t>(c)] + "'): genotype must be 0, 1 or 2");
      }
    }
  }
}

}  // namespace mvkm
