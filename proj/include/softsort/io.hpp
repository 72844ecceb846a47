#pragma once

// Plain-text readers: one real per line for vectors, delimited rows
// (features then response) for datasets. '#' starts a comment.

#include <softsort/core.hpp>

#include <cerrno>
#include <cstdlib>
#include <istream>
#include <string>
#include <vector>

namespace softsort {

class ParseError : public std::invalid_argument {
 public:
  ParseError(const std::string& source, int line, const std::string& what)
      : std::invalid_argument(source + ":" + std::to_string(line) + ": " + what), line_(line) {}
  int line() const { return line_; }

 private:
  int line_;
};

namespace detail {

inline std::string strip_comment(const std::string& line) {
  const auto hash = line.find('#');
  std::string s = hash == std::string::npos ? line : line.substr(0, hash);
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

inline bool parse_real(const std::string& token, double& out) {
  if (token.empty()) return false;
  errno = 0;
  char* end = nullptr;
  out = std::strtod(token.c_str(), &end);
  return errno == 0 && end == token.c_str() + token.size() && std::isfinite(out);
}

inline std::vector<std::string> split_fields(const std::string& s) {
  std::vector<std::string> fields;
  std::string cur;
  for (char ch : s) {
    if (ch == ',' || ch == ';' || ch == ' ' || ch == '\t') {
      if (!cur.empty()) fields.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  if (!cur.empty()) fields.push_back(cur);
  return fields;
}

}  // namespace detail

inline Vector read_vector(std::istream& in, const std::string& source = "<input>") {
  std::vector<double> values;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string s = detail::strip_comment(line);
    if (s.empty()) continue;
    double v = 0.0;
    if (!detail::parse_real(s, v)) throw ParseError(source, lineno, "expected one finite real, got '" + s + "'");
    values.push_back(v);
  }
  return Eigen::Map<const Vector>(values.data(), static_cast<Eigen::Index>(values.size()));
}

struct Dataset {
  Matrix features;  // N x d
  Vector response;  // N

  Eigen::Index size() const { return response.size(); }
  Eigen::Index dim() const { return features.cols(); }
};

/// Rows of `d + 1` fields separated by commas, semicolons or whitespace; the
/// last field is the response. Every row must have the same width.
inline Dataset read_dataset(std::istream& in, const std::string& source = "<dataset>") {
  std::vector<std::vector<double>> rows;
  std::string line;
  int lineno = 0;
  std::size_t width = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string s = detail::strip_comment(line);
    if (s.empty()) continue;
    const auto fields = detail::split_fields(s);
    if (fields.size() < 2) throw ParseError(source, lineno, "need at least one feature and a response");
    if (width == 0) width = fields.size();
    if (fields.size() != width) {
      throw ParseError(source, lineno, "expected " + std::to_string(width) + " fields, got " +
                                           std::to_string(fields.size()));
    }
    std::vector<double> row(width);
    for (std::size_t k = 0; k < width; ++k) {
      if (!detail::parse_real(fields[k], row[k])) {
        throw ParseError(source, lineno, "field " + std::to_string(k + 1) + " is not a finite real");
      }
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw ParseError(source, lineno, "dataset is empty");
  const auto n = static_cast<Eigen::Index>(rows.size());
  const auto d = static_cast<Eigen::Index>(width - 1);
  Dataset ds{Matrix(n, d), Vector(n)};
  for (Eigen::Index r = 0; r < n; ++r) {
    for (Eigen::Index k = 0; k < d; ++k) ds.features(r, k) = rows[r][k];
    ds.response[r] = rows[r][d];
  }
  return ds;
}

}  // namespace softsort
