#pragma once

#include <stdexcept>
#include <string>

namespace clforge {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand shapes do not conform.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// An operation produced NaN/Inf, or training diverged.
class NumericError : public Error {
 public:
  using Error::Error;
};

class PreconditionError : public Error {
 public:
  using Error::Error;
};

// Malformed configuration; carries the offending field name.
class ConfigError : public Error {
 public:
  ConfigError(std::string field, const std::string& message)
      : Error(field + ": " + message), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

// Corrupt or incompatible on-disk container.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace clforge
