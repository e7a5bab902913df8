#pragma once

#include <stdexcept>
#include <string>

namespace hbtp {

// Base of every error raised by the library. The CLI maps these to exit 2.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& file, std::size_t line, const std::string& what)
      : Error(file + ":" + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class ReferentialError : public Error {
 public:
  using Error::Error;
};

class CycleError : public Error {
 public:
  using Error::Error;
};

class DomainError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

// Factorization failed even after jitter.
class ConditioningError : public Error {
 public:
  using Error::Error;
};

// Nonfinite gradient or ELBO term during inference.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace hbtp
