#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace xling {

// Error hierarchy. Everything user-facing derives from Error so the CLI can
// catch one type at the top level.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Incompatible tensor shapes. Message always carries both shapes.
class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// NaN/Inf produced by an op, or a non-finite gradient. Message names the op.
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& msg) : Error(msg) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& msg) : Error(msg) {}
};

// Raised when a test oracle detects its own preconditions are violated
// (e.g. the function under finite differencing is not deterministic).
class OracleError : public Error {
 public:
  explicit OracleError(const std::string& msg) : Error(msg) {}
};

}  // namespace xling
