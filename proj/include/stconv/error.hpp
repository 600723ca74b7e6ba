#pragma once

#include <stdexcept>
#include <string>

namespace stconv {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Incompatible extents, spec/weight mismatches, illegal shape arithmetic.
struct ShapeError : Error {
  using Error::Error;
};

// NaN or Inf produced by a public operation.
struct NonFiniteError : Error {
  using Error::Error;
};

// Bad magic, version, truncated payload, dangling index entries.
struct FormatError : Error {
  using Error::Error;
};

// Invalid hyperparameters or config file contents.
struct ConfigError : Error {
  using Error::Error;
};

}  // namespace stconv
