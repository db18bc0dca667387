#pragma once

#include <stdexcept>
#include <string>

namespace dgsc {

// Error hierarchy. The CLI maps each family onto an exit status:
// ConfigError -> 2, IoError -> 3, EstimationError -> 4.

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Checksum mismatch or malformed checkpoint payload.
class IntegrityError : public IoError {
 public:
  using IoError::IoError;
};

/// Artifact written under a different model configuration or format version.
class CompatibilityError : public IoError {
 public:
  using IoError::IoError;
};

class EstimationError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Non-finite value during evaluation. `where` names the parameter segment
/// or layer that produced it.
class NumericError : public Error {
 public:
  NumericError(const std::string& where, const std::string& what)
      : Error(what + " (at " + where + ")"), where_(where) {}
  const std::string& where() const noexcept { return where_; }

 private:
  std::string where_;
};

}  // namespace dgsc
