#pragma once

#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>

namespace vitad {

// Base of every error the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor extents do not line up.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration value or combination.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Caller broke an operation's precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Malformed file contents (PNM, weight archives).
class FormatError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Dataset layout is inconsistent.
class IndexError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf produced where finite values are required.
class NumericalError : public Error {
 public:
  using Error::Error;
};

// A metric cannot be computed on the given labels (e.g. single-class input).
class UndefinedMetricError : public Error {
 public:
  using Error::Error;
};

namespace detail {

template <typename... Args>
std::string concat(Args&&... args) {
  std::ostringstream oss;
  (oss << ... << std::forward<Args>(args));
  return oss.str();
}

}  // namespace detail

}  // namespace vitad
