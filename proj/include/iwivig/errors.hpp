#pragma once

#include <stdexcept>
#include <string>

namespace iwivig {

// Invalid configuration or shape contract (CLI exit code 1).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Missing, corrupt, or inconsistent data on disk (CLI exit code 2).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite values or undefined numeric quantities (CLI exit code 3).
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace iwivig
