#pragma once

#include <stdexcept>
#include <string>

namespace m2cl {

/// Tensor extents disagree with what an operation requires.
class ShapeError : public std::invalid_argument {
 public:
  explicit ShapeError(const std::string& what) : std::invalid_argument(what) {}
};

/// Invalid user-facing configuration. Maps to CLI exit code 1.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

/// Unreadable, malformed or inconsistent data on disk. Maps to exit code 2.
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

/// Non-finite loss or gradient during training. Maps to exit code 3.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

/// A held-out-domain sample reached the training stream.
class DomainLeakError : public std::logic_error {
 public:
  explicit DomainLeakError(const std::string& what) : std::logic_error(what) {}
};

}  // namespace m2cl
