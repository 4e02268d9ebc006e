#pragma once

#include <stdexcept>
#include <string>

namespace permflow {

// Every library failure derives from Error. The CLI maps the three families
// (config, data, numeric) onto its exit codes; everything else is a caller
// contract violation.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ContractError : public Error {
 public:
  using Error::Error;
};

class DimensionError : public ContractError {
 public:
  using ContractError::ContractError;
};

class IndexError : public ContractError {
 public:
  using ContractError::ContractError;
};

class DomainError : public Error {
 public:
  using Error::Error;
};

// Non-finite values reached a place that requires finite input.
class NumericError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Permutation set cannot be built: P > n!.
class InfeasibleError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

// Random sampling failed to collect enough distinct permutations.
class PoolError : public Error {
 public:
  using Error::Error;
};

// Input data is malformed (CSV, relations, permutation files, checkpoints).
class DataError : public Error {
 public:
  using Error::Error;
};

class ParseError : public DataError {
 public:
  ParseError(const std::string& source, std::size_t line, const std::string& what)
      : DataError(source + ":" + std::to_string(line) + ": " + what), line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

// A metric is undefined for the given scores (e.g. a single class present).
class UndefinedMetricError : public Error {
 public:
  using Error::Error;
};

}  // namespace permflow
