#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace gradcraft {

/// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Caller violated a precondition (dimension mismatch, empty input, bad range).
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Input carries no usable signal, e.g. every task gradient is zero.
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

/// A NaN or Inf appeared where finite values are required.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// The SPD solve failed at every jitter level.
class SingularSystemError : public Error {
 public:
  SingularSystemError(const std::string& what, double pivot)
      : Error(what), pivot_(pivot) {}
  double pivot() const noexcept { return pivot_; }

 private:
  double pivot_;
};

/// AUC/GAUC requested on data without both classes.
class UndefinedMetricError : public Error {
 public:
  using Error::Error;
};

/// Malformed input text. Line and column are 1-based; 0 means unknown.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line = 0,
             std::size_t column = 0)
      : Error(what), line_(line), column_(column) {}
  std::size_t line() const noexcept { return line_; }
  std::size_t column() const noexcept { return column_; }

 private:
  std::size_t line_;
  std::size_t column_;
};

/// Well-formed input that breaks a schema rule; carries the offending field path.
class ValidationError : public Error {
 public:
  ValidationError(const std::string& path, const std::string& what)
      : Error(path.empty() ? what : path + ": " + what), path_(path) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

}  // namespace gradcraft
