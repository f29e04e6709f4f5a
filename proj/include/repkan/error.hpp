#pragma once

#include <stdexcept>
#include <string>

namespace repkan {

/// Process exit codes used by the command-line tool.
enum class ExitCode : int {
  kOk = 0,
  kConfig = 2,
  kData = 3,
  kNumeric = 4,
  kState = 5,
};

/// Base of every error thrown by the library. Each subclass maps to one exit code.
class Error : public std::runtime_error {
 public:
  Error(const std::string& kind, const std::string& detail, ExitCode code)
      : std::runtime_error(kind + ": " + detail), detail_(detail), code_(code) {}
  ExitCode code() const noexcept { return code_; }
  /// Message without the error-kind prefix.
  const std::string& detail() const noexcept { return detail_; }

 private:
  std::string detail_;
  ExitCode code_;
};

/// Tensor shapes disagree.
class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& what) : Error("dimension error", what, ExitCode::kData) {}
};

/// Invalid configuration value or combination.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error("configuration error", what, ExitCode::kConfig) {}
};

/// Out-of-range argument supplied by a caller.
class InputError : public Error {
 public:
  explicit InputError(const std::string& what) : Error("input error", what, ExitCode::kConfig) {}
};

/// Operation not allowed in the object's current state (e.g. train-only call on a deployed layer).
class StateError : public Error {
 public:
  explicit StateError(const std::string& what) : Error("state error", what, ExitCode::kState) {}
};

/// Malformed file contents.
class FormatError : public Error {
 public:
  explicit FormatError(const std::string& what) : Error("format error", what, ExitCode::kData) {}
};

/// Dataset contents unusable for the requested operation (e.g. a constant band).
class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error("data error", what, ExitCode::kData) {}
};

/// Non-finite values or numerically undefined quantities.
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error("numeric error", what, ExitCode::kNumeric) {}
};

}  // namespace repkan
