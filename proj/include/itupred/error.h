#pragma once

#include <stdexcept>
#include <string>

namespace itupred {

// Exception hierarchy. The CLI maps each family to a distinct exit code.

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration value or unreadable config file.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed input record. `what()` names the line and field.
class ParseError : public Error {
 public:
  ParseError(const std::string& source, std::size_t line,
             const std::string& field, const std::string& detail)
      : Error(source + ":" + std::to_string(line) + ": field '" + field +
              "': " + detail),
        line_(line),
        field_(field) {}

  std::size_t line() const { return line_; }
  const std::string& field() const { return field_; }

 private:
  std::size_t line_;
  std::string field_;
};

/// Duplicate or empty lexicon entries.
class LexiconError : public Error {
 public:
  using Error::Error;
};

/// Data that violates an operation's precondition (empty corpus, single
/// class labels, infeasible split sizes, dimension mismatch, ...).
class DataError : public Error {
 public:
  using Error::Error;
};

/// Non-finite parameters or inputs reaching a numeric kernel.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// A required upstream file produced by an earlier pipeline stage is absent.
class MissingArtifactError : public Error {
 public:
  using Error::Error;
};

}  // namespace itupred
