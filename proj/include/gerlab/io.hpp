// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gerlab/errors.hpp"

namespace gerlab {

// Checkpoint containers share one layout: a text header of "key: value"
// lines closed by a "---" line, followed by raw little-endian 64-bit float
// arrays. Readers and writers agree byte for byte.

inline void write_le_doubles(std::ostream& os, std::span<const double> xs) {
  for (double v : xs) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof(bits));
    unsigned char buf[8];
    for (int i = 0; i < 8; ++i)
      buf[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(buf), 8);
  }
}

inline std::vector<double> read_le_doubles(std::istream& is,
                                           std::size_t count) {
  std::vector<double> out(count);
  for (std::size_t k = 0; k < count; ++k) {
    unsigned char buf[8];
    if (!is.read(reinterpret_cast<char*>(buf), 8))
      throw IoError("read_le_doubles: truncated stream");
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i)
      bits |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    std::memcpy(&out[k], &bits, sizeof(double));
  }
  return out;
}

class TextHeader {
 public:
  void set(const std::string& key, const std::string& value) {
    for (auto& [k, v] : fields_)
      if (k == key) {
        v = value;
        return;
      }
    fields_.emplace_back(key, value);
  }

  void set(const std::string& key, std::size_t value) {
    set(key, std::to_string(value));
  }

  bool has(const std::string& key) const {
    for (const auto& [k, v] : fields_)
      if (k == key) return true;
    return false;
  }

  const std::string& get(const std::string& key) const {
    for (const auto& [k, v] : fields_)
      if (k == key) return v;
    throw IoError("header: missing key '" + key + "'");
  }

  std::size_t get_size(const std::string& key) const {
    return static_cast<std::size_t>(std::stoull(get(key)));
  }

  double get_double(const std::string& key) const { return std::stod(get(key)); }

  const std::vector<std::pair<std::string, std::string>>& fields() const {
    return fields_;
  }

  void write(std::ostream& os, const std::string& magic) const {
    os << magic << "\n";
    for (const auto& [k, v] : fields_) os << k << ": " << v << "\n";
    os << "---\n";
  }

  static TextHeader read(std::istream& is, const std::string& magic) {
    std::string line;
    if (!std::getline(is, line) || line != magic)
      throw IoError("header: expected magic '" + magic + "', got '" + line +
                    "'");
    TextHeader h;
    while (std::getline(is, line)) {
      if (line == "---") return h;
      const auto pos = line.find(": ");
      if (pos == std::string::npos)
        throw IoError("header: malformed line '" + line + "'");
      h.fields_.emplace_back(line.substr(0, pos), line.substr(pos + 2));
    }
    throw IoError("header: missing --- terminator");
  }

 private:
  std::vector<std::pair<std::string, std::string>> fields_;
};

inline std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path())
    std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path.string());
  return os;
}

inline std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open for reading: " + path.string());
  return is;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream is = open_in(path);
  std::string s((std::istreambuf_iterator<char>(is)),
                std::istreambuf_iterator<char>());
  return s;
}

inline void write_file(const std::filesystem::path& path,
                       const std::string& content) {
  std::ofstream os = open_out(path);
  os << content;
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

inline std::string join(const std::vector<std::string>& xs,
                        const std::string& sep) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += sep;
    out += xs[i];
  }
  return out;
}

}  // namespace gerlab
