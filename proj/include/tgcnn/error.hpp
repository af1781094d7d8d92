#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace tgcnn {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration value or combination (bad flag, d > K, prevalence out of range).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed or inconsistent input data. Carries a location when one is known.
class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(what) {}
  DataError(const std::string& file, std::size_t line, std::size_t column, const std::string& what)
      : Error(file + ":" + std::to_string(line) + ":" + std::to_string(column) + ": " + what),
        file_(file),
        line_(line),
        column_(column) {}

  const std::string& file() const noexcept { return file_; }
  std::size_t line() const noexcept { return line_; }
  std::size_t column() const noexcept { return column_; }

 private:
  std::string file_;
  std::size_t line_ = 0;
  std::size_t column_ = 0;
};

/// A NaN or infinity showed up where a finite number is required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Broken internal invariant (e.g. a cycle in the computation graph).
class InternalError : public Error {
 public:
  using Error::Error;
};

}  // namespace tgcnn
