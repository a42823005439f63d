#pragma once

#include <stdexcept>
#include <string>

namespace fixelfit {

// Exceptions carry a category so the CLI can map them onto exit codes
// (config = 2, data = 3, numerical = 4).
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Violated precondition or bad configuration value.
struct ConfigError : Error {
  using Error::Error;
};

// Malformed input files, dimension mismatches, I/O failures.
struct DataError : Error {
  using Error::Error;
};

// Divergence, non-finite values, optimizer making no progress.
struct NumericalError : Error {
  using Error::Error;
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw ConfigError(what);
}

}  // namespace fixelfit
