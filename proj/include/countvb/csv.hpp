#pragma once

// Minimal comma-separated tables: a header row, then records. Fields are
// trimmed; quoting is not supported. Numbers are written with 17
// significant digits so they round-trip.

#include <charconv>
#include <cstdio>
#include <istream>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "countvb/errors.hpp"

namespace countvb::csv {

inline std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline std::vector<std::string> split(std::string_view line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    out.emplace_back(trim(line.substr(start, comma == std::string_view::npos ? line.npos : comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

/// Parses a decimal number; nullopt unless the whole field is consumed.
inline std::optional<double> parse_number(std::string_view field) {
  field = trim(field);
  if (field.empty()) return std::nullopt;
  if (field.front() == '+') field.remove_prefix(1);
  double v = 0.0;
  const auto res = std::from_chars(field.data(), field.data() + field.size(), v);
  if (res.ec != std::errc() || res.ptr != field.data() + field.size()) return std::nullopt;
  return v;
}

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::vector<std::size_t> line_numbers;  // 1-based source line of each row

  std::size_t size() const { return rows.size(); }

  std::size_t column_index(const std::string& name) const {
    for (std::size_t j = 0; j < header.size(); ++j) {
      if (header[j] == name) return j;
    }
    throw DataError("missing column '" + name + "'");
  }

  double number(std::size_t row, std::size_t col) const {
    const auto v = parse_number(rows[row][col]);
    if (!v) {
      throw DataError("line " + std::to_string(line_numbers[row]) + ": column '" + header[col] +
                      "' is not a number ('" + rows[row][col] + "')");
    }
    return *v;
  }

  std::vector<double> numeric_column(const std::string& name) const {
    const auto j = column_index(name);
    std::vector<double> out(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) out[i] = number(i, j);
    return out;
  }

  std::vector<std::string> text_column(const std::string& name) const {
    const auto j = column_index(name);
    std::vector<std::string> out(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) out[i] = rows[i][j];
    return out;
  }
};

/// Reads a header and records; blank lines are skipped, and a record with
/// the wrong number of fields is an error naming its line.
inline Table read(std::istream& in) {
  Table t;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (trim(line).empty()) continue;
    auto fields = split(line);
    if (t.header.empty()) {
      t.header = std::move(fields);
      continue;
    }
    if (fields.size() != t.header.size()) {
      throw DataError("line " + std::to_string(number) + ": expected " + std::to_string(t.header.size()) +
                      " fields, found " + std::to_string(fields.size()));
    }
    t.rows.push_back(std::move(fields));
    t.line_numbers.push_back(number);
  }
  if (t.header.empty()) throw DataError("input has no header row");
  return t;
}

inline void write_row(std::ostream& os, const std::vector<std::string>& fields) {
  for (std::size_t j = 0; j < fields.size(); ++j) os << (j ? "," : "") << fields[j];
  os << '\n';
}

inline void write_row(std::ostream& os, const std::vector<double>& values) {
  for (std::size_t j = 0; j < values.size(); ++j) os << (j ? "," : "") << format_number(values[j]);
  os << '\n';
}

}  // namespace countvb::csv
