#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "dlplora/errors.hpp"
#include "dlplora/numerics.hpp"

namespace dlplora {

using Json = nlohmann::json;

// Matrices are persisted as nested row arrays. Floats go through double, which
// nlohmann prints with round-trip precision, so save/load is value-exact.
inline Json matrix_to_json(const Matrix& m) {
  Json rows = Json::array();
  for (std::size_t r = 0; r < m.rows(); ++r) {
    Json row = Json::array();
    for (float v : m.row(r)) row.push_back(static_cast<double>(v));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline Matrix matrix_from_json(const Json& j, const std::string& what) {
  if (!j.is_array()) throw FormatError(what + ": expected nested float arrays");
  const std::size_t rows = j.size();
  const std::size_t cols = rows == 0 ? 0 : j.front().size();
  Matrix m(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    const Json& row = j[r];
    if (!row.is_array() || row.size() != cols) throw FormatError(what + ": ragged rows");
    for (std::size_t c = 0; c < cols; ++c) {
      if (!row[c].is_number()) throw FormatError(what + ": non-numeric entry");
      m(r, c) = static_cast<float>(row[c].get<double>());
    }
  }
  return m;
}

inline Json vector_to_json(std::span<const float> v) {
  Json a = Json::array();
  for (float x : v) a.push_back(static_cast<double>(x));
  return a;
}

inline std::vector<float> vector_from_json(const Json& j, const std::string& what) {
  if (!j.is_array()) throw FormatError(what + ": expected a float array");
  std::vector<float> v;
  v.reserve(j.size());
  for (const auto& x : j) {
    if (!x.is_number()) throw FormatError(what + ": non-numeric entry");
    v.push_back(static_cast<float>(x.get<double>()));
  }
  return v;
}

inline void check_format_version(const Json& doc, int expected, const std::string& what) {
  if (!doc.contains("format_version") || !doc["format_version"].is_number_integer()) {
    throw FormatError(what + ": missing format_version");
  }
  const int v = doc["format_version"].get<int>();
  if (v != expected) {
    throw FormatError(what + ": unsupported format_version " + std::to_string(v) +
                      " (expected " + std::to_string(expected) + ")");
  }
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

inline Json read_json_file(const std::filesystem::path& path) {
  const std::string text = read_text_file(path);
  try {
    return Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

inline void write_json_file(const std::filesystem::path& path, const Json& doc) {
  write_text_file(path, doc.dump(1) + "\n");
}

}  // namespace dlplora
