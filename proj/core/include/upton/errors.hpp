#pragma once

#include <stdexcept>
#include <string>

namespace upton {

// Error taxonomy maps onto CLI exit codes: ConfigError (and subclasses) -> 2,
// IoError -> 3, DivergenceError -> 4.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid parameters, invalid configuration files, or malformed inputs.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed record in a data file; message carries the line number.
class ParseError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

// Filesystem failures: unreadable paths, failed writes.
class IoError : public Error {
 public:
  using Error::Error;
};

// Non-finite loss or weights during optimization; message names the epoch.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace upton
