#pragma once

#include <stdexcept>

namespace lmkit {

// Invalid model or run configuration (bad dimensions, inconsistent options).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A sequence does not fit the backend's maximum length.
class LengthError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Caller broke an API contract (mismatched lengths, empty inputs, ...).
class ContractError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed dataset file or record; messages carry 1-based line numbers.
class SchemaError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace lmkit
