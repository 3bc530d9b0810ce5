#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cubeworld/error.hpp"

namespace cubeworld::io {

// All on-disk integers and floats are little-endian; the library only targets
// little-endian hosts.
static_assert(std::endian::native == std::endian::little);

class Writer {
 public:
  explicit Writer(const std::filesystem::path& path) : path_(path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    out_.open(tmp_path(), std::ios::binary | std::ios::trunc);
    if (!out_) throw Error("cannot open " + path.string() + " for writing");
  }

  void magic(std::string_view m) { out_.write(m.data(), static_cast<std::streamsize>(m.size())); }

  template <class T>
  void pod(const T& v) {
    static_assert(std::is_trivially_copyable_v<T>);
    out_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }

  template <class T>
  void array(std::span<const T> v) {
    out_.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size_bytes()));
  }

  void string(std::string_view s) {
    pod<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    magic(s);
  }

  /// Flushes and atomically moves the temporary file into place.
  void commit() {
    out_.close();
    if (!out_) throw Error("write failed for " + path_.string());
    std::filesystem::rename(tmp_path(), path_);
  }

 private:
  std::filesystem::path tmp_path() const { return path_.string() + ".tmp"; }

  std::filesystem::path path_;
  std::ofstream out_;
};

class Reader {
 public:
  explicit Reader(const std::filesystem::path& path) : path_(path) {
    in_.open(path, std::ios::binary);
    if (!in_) throw FormatError("cannot open " + path.string());
    in_.seekg(0, std::ios::end);
    size_ = static_cast<std::uint64_t>(in_.tellg());
    in_.seekg(0);
  }

  void expect_magic(std::string_view m) {
    std::string got(m.size(), '\0');
    read_raw(got.data(), got.size());
    if (got != m) throw FormatError(path_.string() + ": bad magic, expected " + std::string(m));
  }

  template <class T>
  T pod() {
    T v;
    read_raw(reinterpret_cast<char*>(&v), sizeof(T));
    return v;
  }

  template <class T>
  void array(std::span<T> v) {
    read_raw(reinterpret_cast<char*>(v.data()), v.size_bytes());
  }

  std::string string() {
    auto n = pod<std::uint32_t>();
    if (n > remaining()) throw FormatError(path_.string() + ": truncated string");
    std::string s(n, '\0');
    read_raw(s.data(), n);
    return s;
  }

  std::uint64_t remaining() {
    return size_ - static_cast<std::uint64_t>(in_.tellg());
  }

  void expect_eof() {
    if (remaining() != 0) throw FormatError(path_.string() + ": trailing bytes");
  }

  const std::filesystem::path& path() const { return path_; }

 private:
  void read_raw(char* dst, std::size_t n) {
    if (n > remaining()) throw FormatError(path_.string() + ": truncated file");
    in_.read(dst, static_cast<std::streamsize>(n));
    if (!in_) throw FormatError(path_.string() + ": read error");
  }

  std::filesystem::path path_;
  std::ifstream in_;
  std::uint64_t size_ = 0;
};

}  // namespace cubeworld::io
