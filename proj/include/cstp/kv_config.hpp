#pragma once

#include <charconv>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "cstp/tensor.hpp"

namespace cstp {

/// Raised for malformed configuration documents or out-of-range settings.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

/// Shortest round-trip decimal form of a double.
inline std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

inline double parse_double(std::string_view text, const std::string& what) {
  const std::string t = trim(text);
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc() || ptr != t.data() + t.size() || t.empty()) {
    throw DataError("cannot parse number '" + t + "' in " + what);
  }
  return v;
}

/// Flat `key = value` document. '#' starts a comment; keys are unique.
class KvConfig {
 public:
  KvConfig() = default;

  static KvConfig parse(std::istream& in, const std::string& origin = "config") {
    KvConfig cfg;
    cfg.origin_ = origin;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      const std::string body = trim(line);
      if (body.empty()) continue;
      const auto eq = body.find('=');
      if (eq == std::string::npos) {
        throw ConfigError(origin + ":" + std::to_string(line_no) + ": expected 'key = value'");
      }
      const std::string key = trim(body.substr(0, eq));
      if (key.empty()) throw ConfigError(origin + ":" + std::to_string(line_no) + ": empty key");
      if (!cfg.values_.emplace(key, trim(body.substr(eq + 1))).second) {
        throw ConfigError(origin + ":" + std::to_string(line_no) + ": duplicate key '" + key + "'");
      }
    }
    return cfg;
  }

  static KvConfig parse_string(const std::string& text, const std::string& origin = "config") {
    std::istringstream in(text);
    return parse(in, origin);
  }

  static KvConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    return parse(in, path);
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  void set(const std::string& key, std::string value) { values_[key] = std::move(value); }

  std::string get_string(const std::string& key, const std::string& fallback) const {
    used_.insert(key);
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  double get_double(const std::string& key, double fallback) const {
    used_.insert(key);
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
      return parse_double(it->second, origin_ + " key '" + key + "'");
    } catch (const DataError& e) {
      throw ConfigError(e.what());
    }
  }

  long get_int(const std::string& key, long fallback) const {
    used_.insert(key);
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    long v = 0;
    const std::string& t = it->second;
    auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (ec != std::errc() || ptr != t.data() + t.size()) {
      throw ConfigError(origin_ + ": key '" + key + "' expects an integer, got '" + t + "'");
    }
    return v;
  }

  std::size_t get_size(const std::string& key, std::size_t fallback) const {
    const long v = get_int(key, static_cast<long>(fallback));
    if (v < 0) throw ConfigError(origin_ + ": key '" + key + "' must be non-negative");
    return static_cast<std::size_t>(v);
  }

  bool get_bool(const std::string& key, bool fallback) const {
    used_.insert(key);
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    if (it->second == "true" || it->second == "1" || it->second == "yes") return true;
    if (it->second == "false" || it->second == "0" || it->second == "no") return false;
    throw ConfigError(origin_ + ": key '" + key + "' expects true/false, got '" + it->second + "'");
  }

  /// Comma-separated list of integers.
  std::vector<std::size_t> get_size_list(const std::string& key, std::vector<std::size_t> fallback) const {
    used_.insert(key);
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    std::vector<std::size_t> out;
    for (const auto& item : get_list(key)) {
      long v = 0;
      auto [ptr, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
      if (ec != std::errc() || ptr != item.data() + item.size() || v <= 0) {
        throw ConfigError(origin_ + ": key '" + key + "' expects positive integers, got '" + item + "'");
      }
      out.push_back(static_cast<std::size_t>(v));
    }
    return out;
  }

  std::vector<std::string> get_list(const std::string& key) const {
    used_.insert(key);
    std::vector<std::string> out;
    auto it = values_.find(key);
    if (it == values_.end()) return out;
    std::stringstream ss(it->second);
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = trim(item);
      if (!item.empty()) out.push_back(item);
    }
    return out;
  }

  /// Rejects keys that no getter has asked for.
  void reject_unknown() const {
    std::string unknown;
    for (const auto& [k, v] : values_) {
      if (!used_.count(k)) unknown += (unknown.empty() ? "" : ", ") + k;
    }
    if (!unknown.empty()) throw ConfigError(origin_ + ": unknown key(s): " + unknown);
  }

  const std::map<std::string, std::string>& entries() const { return values_; }

  std::string to_string() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
    return out;
  }

 private:
  std::string origin_ = "config";
  std::map<std::string, std::string> values_;
  mutable std::set<std::string> used_;
};

}  // namespace cstp
