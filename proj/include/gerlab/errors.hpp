// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace gerlab {

// Base class for every error thrown by this library. Subclasses map onto the
// CLI exit-code contract: config/data problems exit 3, integrity violations
// (frozen parameter drift) exit 4.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor shapes disagree (e.g. matmul inner dimensions).
class DimensionError : public Error {
 public:
  using Error::Error;
};

// An API precondition was violated (non-scalar loss, missing grad, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

// A token or class index is out of range.
class IndexError : public Error {
 public:
  using Error::Error;
};

// Non-finite values encountered where finite math was required.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Bad configuration value or impossible configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed or inconsistent input data.
class DataError : public Error {
 public:
  using Error::Error;
};

// A word is not present in the lexicon.
class VocabularyError : public Error {
 public:
  using Error::Error;
};

// A declared-frozen parameter group changed during training.
class IntegrityError : public Error {
 public:
  using Error::Error;
};

// File I/O or serialization failure.
class IoError : public Error {
 public:
  using Error::Error;
};

// A diagnostics dump could not be parsed.
class ReportError : public Error {
 public:
  using Error::Error;
};

}  // namespace gerlab
