#pragma once

// Append-only metrics stream: one JSON object per line. Records carry no
// timestamps, so reruns with the same inputs produce identical files.

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <string>

#include "cubeworld/error.hpp"

namespace cubeworld {

using Json = nlohmann::ordered_json;

class MetricsWriter {
 public:
  MetricsWriter() = default;
  /// Truncates unless `append` is set.
  explicit MetricsWriter(const std::filesystem::path& path, bool append = false) : path_(path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    out_.open(path, append ? std::ios::app : std::ios::trunc);
    if (!out_) throw Error("cannot open metrics file " + path.string());
  }

  bool is_open() const { return out_.is_open(); }

  void write(const Json& record) {
    if (!out_.is_open()) return;
    out_ << record.dump() << '\n';
    out_.flush();
  }

  /// Summary record: one value for a (metric, complexity bucket) pair.
  void value(const std::string& run, const std::string& metric, const std::string& bucket, double v, long count) {
    write(Json{{"run", run}, {"metric", metric}, {"bucket", bucket}, {"value", v}, {"count", count}});
  }

  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
};

inline std::vector<Json> read_metrics(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifactError("metrics file " + path.string() + " not found", "eval");
  std::vector<Json> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      out.push_back(Json::parse(line));
    } catch (const Json::parse_error& e) {
      throw FormatError(path.string() + ": bad metrics line: " + e.what());
    }
  }
  return out;
}

}  // namespace cubeworld
