#pragma once

#include <stdexcept>
#include <string>

namespace mvpb {

/// Broad failure category; the CLI maps each one to its own exit code.
enum class ErrorCategory {
  kIngestion,
  kComputation,
  kConfiguration,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& what)
      : std::runtime_error(what), category_(category) {}

  ErrorCategory category() const noexcept { return category_; }

 private:
  ErrorCategory category_;
};

/// Input data violates a model precondition (too few studies, bad se, ...).
class DataError : public Error {
 public:
  explicit DataError(const std::string& what)
      : Error(ErrorCategory::kIngestion, what) {}
};

/// A design or covariance matrix is singular or sits on a correlation boundary.
class DegenerateError : public Error {
 public:
  explicit DegenerateError(const std::string& what)
      : Error(ErrorCategory::kComputation, what) {}
};

/// An iterative procedure ran out of iterations.
class ConvergenceError : public Error {
 public:
  explicit ConvergenceError(const std::string& what)
      : Error(ErrorCategory::kComputation, what) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what)
      : Error(ErrorCategory::kConfiguration, what) {}
};

}  // namespace mvpb
