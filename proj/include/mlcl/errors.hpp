#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace mlcl {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Invalid argument or configuration value (CLI exit code 2).
struct ConfigError : Error {
  using Error::Error;
};

/// Tensor or container dimensions do not line up.
struct ShapeError : Error {
  using Error::Error;
};

/// NaN/Inf detected or an estimator blew up (CLI exit code 3).
struct NumericError : Error {
  using Error::Error;
};

/// Malformed input file. `line` is 1-based, 0 when not tied to a line.
struct ParseError : Error {
  ParseError(const std::string& file, std::size_t line, const std::string& what)
      : Error(file + ":" + std::to_string(line) + ": " + what), line(line) {}
  std::size_t line;
};

}  // namespace mlcl
