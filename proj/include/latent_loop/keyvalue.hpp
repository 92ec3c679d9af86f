#pragma once

#include <charconv>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "latent_loop/errors.hpp"

namespace latent_loop {

/// Ordered "key: value" document. '#' starts a comment; blank lines are
/// ignored; later assignments to a key replace earlier ones in place.
class KeyValueText {
 public:
  static KeyValueText parse(std::string_view text, std::string_view origin = "<text>") {
    KeyValueText doc;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
      std::size_t end = text.find('\n', pos);
      if (end == std::string_view::npos) end = text.size();
      std::string_view line = text.substr(pos, end - pos);
      pos = end + 1;
      ++line_no;
      if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
      line = trim(line);
      if (line.empty()) {
        if (end == text.size()) break;
        continue;
      }
      const auto colon = line.find(':');
      if (colon == std::string_view::npos) {
        throw InputError(std::string(origin) + ":" + std::to_string(line_no) + ": expected 'key: value'");
      }
      const auto key = trim(line.substr(0, colon));
      if (key.empty()) throw InputError(std::string(origin) + ":" + std::to_string(line_no) + ": empty key");
      doc.set(std::string(key), std::string(trim(line.substr(colon + 1))));
      if (end == text.size()) break;
    }
    return doc;
  }

  static KeyValueText load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open " + path.string());
    std::stringstream buf;
    buf << in.rdbuf();
    return parse(buf.str(), path.string());
  }

  void set(const std::string& key, std::string value) {
    for (auto& [k, v] : entries_) {
      if (k == key) {
        v = std::move(value);
        return;
      }
    }
    entries_.emplace_back(key, std::move(value));
  }

  bool contains(std::string_view key) const { return find(key) != nullptr; }

  const std::string* find(std::string_view key) const {
    for (const auto& [k, v] : entries_)
      if (k == key) return &v;
    return nullptr;
  }

  const std::string& at(std::string_view key) const {
    if (const auto* v = find(key)) return *v;
    throw InputError("missing key '" + std::string(key) + "'");
  }

  const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

  std::string to_string() const {
    std::string out;
    for (const auto& [k, v] : entries_) out += k + ": " + v + "\n";
    return out;
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot write " + path.string());
    out << to_string();
  }

  static std::string_view trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string_view::npos) return {};
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
  }

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
};

inline std::vector<std::string> split(std::string_view text, char sep) {
  std::vector<std::string> parts;
  if (KeyValueText::trim(text).empty()) return parts;
  std::size_t pos = 0;
  while (true) {
    const auto next = text.find(sep, pos);
    parts.emplace_back(KeyValueText::trim(text.substr(pos, next == std::string_view::npos ? text.npos : next - pos)));
    if (next == std::string_view::npos) break;
    pos = next + 1;
  }
  return parts;
}

inline std::uint64_t parse_u64(std::string_view s, std::string_view what) {
  std::uint64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    throw ConfigError("'" + std::string(what) + "' expects a non-negative integer, got '" + std::string(s) + "'");
  }
  return v;
}

inline double parse_double(std::string_view s, std::string_view what) {
  try {
    std::size_t used = 0;
    const std::string str(s);
    const double v = std::stod(str, &used);
    if (used != str.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("'" + std::string(what) + "' expects a number, got '" + std::string(s) + "'");
  }
}

inline std::vector<std::size_t> parse_index_list(std::string_view s, std::string_view what) {
  std::vector<std::size_t> out;
  for (const auto& part : split(s, ',')) out.push_back(static_cast<std::size_t>(parse_u64(part, what)));
  return out;
}

template <typename Range>
std::string join(const Range& items, std::string_view sep = ",") {
  std::ostringstream out;
  bool first = true;
  for (const auto& item : items) {
    if (!first) out << sep;
    out << item;
    first = false;
  }
  return out.str();
}

// Shortest decimal text that round-trips to the same double.
inline std::string format_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, p);
}

}  // namespace latent_loop
