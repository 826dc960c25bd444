#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace fscil {

// Error categories map one-to-one onto CLI exit codes (see tools/fscil.cpp).

/// Invalid argument, shape mismatch or infeasible configuration.
class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Input lies outside the mathematical domain of an operation (zero vector, ...).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Operation called in a state where it is not allowed (train-mode BN on one row, ...).
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Protocol invariant broken: frozen parameter updated, discarded data accessed.
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Numerical failure with a diagnostic, e.g. a non positive-definite covariance.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed file. Carries the byte offset at which parsing failed.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

}  // namespace fscil
