#pragma once

#include <stdexcept>
#include <string>

namespace implab {

// Error taxonomy mirrors the CLI exit codes: config 2, numeric 3, io 4.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DimensionError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

struct NumericError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

}  // namespace implab
