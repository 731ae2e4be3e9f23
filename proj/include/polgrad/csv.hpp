#pragma once

// Minimal RFC-4180 CSV: CRLF-free output ("\n" line ends), fields quoted only
// when they contain a comma, quote, or newline.

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "polgrad/error.hpp"

namespace polgrad::csv {

/// Shortest-safe round-trip text for a double (17 significant digits).
inline std::string format_double(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

inline std::string format_optional(const std::optional<double>& x) {
  return x ? format_double(*x) : std::string{};
}

inline double parse_double(const std::string& s) {
  if (s.empty()) throw IoError("csv: empty numeric field");
  char* end = nullptr;
  const double x = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size()) throw IoError("csv: bad number '" + s + "'");
  return x;
}

inline std::optional<double> parse_optional(const std::string& s) {
  if (s.empty()) return std::nullopt;
  return parse_double(s);
}

inline std::string escape(const std::string& field) {
  if (field.find_first_of(",\"\n\r") == std::string::npos) return field;
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

inline std::string join(const std::vector<std::string>& fields) {
  std::string line;
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) line += ',';
    line += escape(fields[i]);
  }
  return line;
}

/// Parses a whole document into rows of fields.
inline std::vector<std::vector<std::string>> parse(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false;
  bool any = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field += c;
      }
      continue;
    }
    if (c == '"') {
      quoted = true;
      any = true;
    } else if (c == ',') {
      row.push_back(std::move(field));
      field.clear();
      any = true;
    } else if (c == '\n' || c == '\r') {
      if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
      if (any || !field.empty()) {
        row.push_back(std::move(field));
        rows.push_back(std::move(row));
      }
      row.clear();
      field.clear();
      any = false;
    } else {
      field += c;
      any = true;
    }
  }
  if (quoted) throw IoError("csv: unterminated quoted field");
  if (any || !field.empty()) {
    row.push_back(std::move(field));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline std::vector<std::vector<std::string>> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse(ss.str());
}

/// Column lookup over a parsed file whose first row is the header.
class Table {
 public:
  explicit Table(std::vector<std::vector<std::string>> rows) : rows_(std::move(rows)) {
    if (rows_.empty()) throw IoError("csv: missing header row");
  }

  std::size_t size() const { return rows_.size() - 1; }

  std::size_t column(const std::string& name) const {
    const auto& h = rows_.front();
    for (std::size_t i = 0; i < h.size(); ++i) {
      if (h[i] == name) return i;
    }
    throw IoError("csv: no column '" + name + "'");
  }

  const std::string& at(std::size_t row, const std::string& name) const {
    const auto& r = rows_.at(row + 1);
    const std::size_t c = column(name);
    if (c >= r.size()) throw IoError("csv: short row");
    return r[c];
  }

  double number(std::size_t row, const std::string& name) const {
    return parse_double(at(row, name));
  }

 private:
  std::vector<std::vector<std::string>> rows_;
};

}  // namespace polgrad::csv
