#pragma once

#include <stdexcept>
#include <string>

namespace moseg {

// Bad user input: malformed config, invalid scene specs, mismatched shapes.
// The CLI maps this to exit code 1.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shape mismatch. A configuration-class error; carries both shapes.
class ShapeError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

// Malformed file contents (bad magic, truncated payload). Exit code 2.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace moseg
