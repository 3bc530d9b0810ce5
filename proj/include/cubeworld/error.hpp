#pragma once

#include <stdexcept>
#include <string>

namespace cubeworld {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Input that does not describe a valid object (unreachable cube, bad token, ...).
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Malformed, truncated or version-mismatched files.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Numerical failure during training (NaN/Inf loss or gradient).
class DivergenceError : public Error {
 public:
  using Error::Error;
};

/// A required artifact has not been produced yet.
class MissingArtifactError : public Error {
 public:
  MissingArtifactError(const std::string& what, const std::string& producer)
      : Error(what + " (run `" + producer + "` first)"), producer_(producer) {}
  const std::string& producer() const { return producer_; }

 private:
  std::string producer_;
};

}  // namespace cubeworld
