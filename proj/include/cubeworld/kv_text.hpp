#pragma once

// Minimal `key = value` text files used for manifests, configs and run records.
// Blank lines and lines starting with '#' are ignored. Keys keep insertion order.

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "cubeworld/error.hpp"

namespace cubeworld {

class KeyValueText {
 public:
  void set(const std::string& key, const std::string& value) {
    if (auto it = index_.find(key); it != index_.end()) {
      entries_[it->second].second = value;
      return;
    }
    index_[key] = entries_.size();
    entries_.emplace_back(key, value);
  }

  template <class T>
  void set_number(const std::string& key, T v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    set(key, os.str());
  }

  template <class Range>
  void set_list(const std::string& key, const Range& values) {
    std::ostringstream os;
    os.precision(17);
    bool first = true;
    for (const auto& v : values) {
      if (!first) os << ' ';
      os << v;
      first = false;
    }
    set(key, os.str());
  }

  bool has(const std::string& key) const { return index_.count(key) != 0; }

  const std::string& get(const std::string& key) const {
    auto it = index_.find(key);
    if (it == index_.end()) throw FormatError("missing key: " + key);
    return entries_[it->second].second;
  }

  std::string get_or(const std::string& key, const std::string& fallback) const {
    return has(key) ? get(key) : fallback;
  }

  double get_double(const std::string& key) const { return std::stod(get(key)); }
  long long get_int(const std::string& key) const { return std::stoll(get(key)); }

  std::vector<double> get_list(const std::string& key) const {
    std::istringstream is(get(key));
    std::vector<double> out;
    for (double v; is >> v;) out.push_back(v);
    return out;
  }

  const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

  std::string str() const {
    std::string s;
    for (const auto& [k, v] : entries_) s += k + " = " + v + "\n";
    return s;
  }

  void save(const std::filesystem::path& path) const {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto tmp = path.string() + ".tmp";
    {
      std::ofstream out(tmp, std::ios::trunc);
      if (!out) throw Error("cannot write " + path.string());
      out << str();
    }
    std::filesystem::rename(tmp, path);
  }

  static KeyValueText parse(std::istream& in, const std::string& origin = "<text>") {
    KeyValueText kv;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto first = line.find_first_not_of(" \t\r");
      if (first == std::string::npos || line[first] == '#') continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw FormatError(origin + ":" + std::to_string(lineno) + ": expected key = value");
      kv.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return kv;
  }

  static KeyValueText load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open " + path.string());
    return parse(in, path.string());
  }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

  std::vector<std::pair<std::string, std::string>> entries_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace cubeworld
