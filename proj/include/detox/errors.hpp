#pragma once

#include <stdexcept>
#include <string>

namespace detox {

// Input or configuration problems the caller can fix. The CLI maps these to
// exit code 1; everything else is a runtime failure (exit code 2).
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ShapeError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class IndexError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class LengthError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class LexicalError : public ValidationError {
 public:
  explicit LexicalError(const std::string& word)
      : ValidationError("unknown word: '" + word + "'"), word_(word) {}
  const std::string& word() const { return word_; }

 private:
  std::string word_;
};

class ParseError : public ValidationError {
 public:
  ParseError(std::size_t line, const std::string& what)
      : ValidationError("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

// Thrown by precondition checks on domain values (non-finite input, bad
// distributions, invalid probabilities).
class NumericDomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class DegenerateStatisticsError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class RoleMisuseError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class StalenessError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class MappingError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace detox
