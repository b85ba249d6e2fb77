#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <system_error>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

namespace mlem {

/// Shortest round-trip decimal form of a double ("nan" / "inf" / "-inf" for non-finite values).
inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& s) {
  std::string t = s;
  t.erase(0, t.find_first_not_of(" \t"));
  t.erase(t.find_last_not_of(" \t\r") + 1);
  if (t == "nan") return std::numeric_limits<double>::quiet_NaN();
  if (t == "inf") return std::numeric_limits<double>::infinity();
  if (t == "-inf") return -std::numeric_limits<double>::infinity();
  double v = 0.0;
  const char* first = t.data();
  if (!t.empty() && t[0] == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, t.data() + t.size(), v);
  if (ec != std::errc() || ptr != t.data() + t.size()) throw std::invalid_argument("not a number: '" + s + "'");
  return v;
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, ',')) {
    cur.erase(0, cur.find_first_not_of(" \t[]"));
    cur.erase(cur.find_last_not_of(" \t[]\r") + 1);
    if (!cur.empty()) out.push_back(cur);
  }
  return out;
}

/// INI-style configuration (`[section]` headers, `key = value` lines, `#` or `;`
/// comments, comma-separated lists). Every key read is marked; `finish()`
/// rejects whatever was never read.
class Config {
 public:
  static Config parse(const std::string& text) {
    Config c;
    std::istringstream in(text);
    try {
      boost::property_tree::ini_parser::read_ini(in, c.tree_);
    } catch (const boost::property_tree::ini_parser_error& e) {
      throw std::invalid_argument(std::string("config: ") + e.message() + " at line " + std::to_string(e.line()));
    }
    return c;
  }

  static Config load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("config: cannot open " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    try {
      return parse(ss.str());
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(path + ": " + e.what());
    }
  }

  bool has(const std::string& key) const { return static_cast<bool>(tree_.get_optional<std::string>(path(key))); }

  bool has_section(const std::string& section) const {
    return static_cast<bool>(tree_.get_child_optional(boost::property_tree::ptree::path_type(section, '\x1f')));
  }

  std::string get_string(const std::string& key, const std::string& def) const {
    return has(key) ? raw(key) : def;
  }
  std::string require_string(const std::string& key) const {
    if (!has(key)) throw std::invalid_argument("config: missing required key '" + key + "'");
    return raw(key);
  }

  double get_double(const std::string& key, double def) const { return has(key) ? to_double(key) : def; }
  double require_double(const std::string& key) const {
    require_string(key);
    return to_double(key);
  }

  long long get_int(const std::string& key, long long def) const { return has(key) ? to_int(key, raw(key)) : def; }
  long long require_int(const std::string& key) const { return to_int(key, require_string(key)); }

  std::uint64_t get_u64(const std::string& key, std::uint64_t def) const {
    if (!has(key)) return def;
    const std::string s = raw(key);
    std::uint64_t v = 0;
    int base = 10;
    const char* first = s.data();
    if (s.size() > 2 && s[0] == '0' && (s[1] == 'x' || s[1] == 'X')) {
      base = 16;
      first += 2;
    }
    auto [ptr, ec] = std::from_chars(first, s.data() + s.size(), v, base);
    if (ec != std::errc() || ptr != s.data() + s.size())
      throw std::invalid_argument("config: key '" + key + "' is not an unsigned integer");
    return v;
  }

  bool get_bool(const std::string& key, bool def) const {
    if (!has(key)) return def;
    const std::string s = raw(key);
    if (s == "true" || s == "1") return true;
    if (s == "false" || s == "0") return false;
    throw std::invalid_argument("config: key '" + key + "' is not a boolean");
  }

  std::vector<double> get_doubles(const std::string& key, std::vector<double> def) const {
    if (!has(key)) return def;
    std::vector<double> out;
    for (const auto& item : split_list(raw(key))) {
      try {
        out.push_back(parse_double(item));
      } catch (const std::invalid_argument&) {
        throw std::invalid_argument("config: key '" + key + "' has a non-numeric entry '" + item + "'");
      }
    }
    return out;
  }

  std::vector<int> get_ints(const std::string& key, std::vector<int> def) const {
    if (!has(key)) return def;
    std::vector<int> out;
    for (const auto& item : split_list(raw(key))) out.push_back(static_cast<int>(to_int(key, item)));
    return out;
  }

  /// Overrides (or adds) `section.key`.
  void set(const std::string& key, const std::string& value) { tree_.put(path(key), value); }

  /// Throws listing every key in the file that no getter asked for.
  void finish() const {
    std::vector<std::string> unknown;
    collect(tree_, "", unknown);
    if (!unknown.empty()) {
      std::string msg = "config: unknown key(s):";
      for (const auto& k : unknown) msg += " " + k;
      throw std::invalid_argument(msg);
    }
  }

 private:
  static boost::property_tree::ptree::path_type path(const std::string& key) {
    return boost::property_tree::ptree::path_type(key, '.');
  }

  std::string raw(const std::string& key) const {
    used_.insert(key);
    std::string s = tree_.get<std::string>(path(key));
    s.erase(0, s.find_first_not_of(" \t"));
    s.erase(s.find_last_not_of(" \t\r") + 1);
    if (s.size() >= 2 && s.front() == '"' && s.back() == '"') s = s.substr(1, s.size() - 2);
    return s;
  }

  double to_double(const std::string& key) const {
    try {
      return parse_double(raw(key));
    } catch (const std::invalid_argument&) {
      throw std::invalid_argument("config: key '" + key + "' is not a number");
    }
  }

  static long long to_int(const std::string& key, const std::string& s) {
    long long v = 0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size())
      throw std::invalid_argument("config: key '" + key + "' is not an integer");
    return v;
  }

  void collect(const boost::property_tree::ptree& node, const std::string& prefix,
               std::vector<std::string>& unknown) const {
    for (const auto& [name, child] : node) {
      const std::string key = prefix.empty() ? name : prefix + "." + name;
      if (child.empty()) {
        if (!used_.count(key)) unknown.push_back(key);
      } else {
        collect(child, key, unknown);
      }
    }
  }

  boost::property_tree::ptree tree_;
  mutable std::set<std::string> used_;
};

}  // namespace mlem
