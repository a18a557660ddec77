#pragma once

#include <stdexcept>
#include <string>

namespace patr {

/// Bad shapes, out-of-range hyper-parameters, unknown config keys.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Malformed or inconsistent on-disk / user-supplied data.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Text that tokenizes to nothing.
class EmptyTextError : public DataError {
 public:
  using DataError::DataError;
};

/// NaN/Inf during optimization or a non-deterministic forward pass.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace patr
