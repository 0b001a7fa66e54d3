#pragma once

#include <stdexcept>
#include <string>

namespace wavg {

// Bad caller-supplied data: shape mismatches, out-of-range labels, layouts
// that do not agree.
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// An operation was called outside its precondition (e.g. backward on an
// eval-mode cache, materializing an average that never absorbed anything).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Train-mode batch normalization needs at least two rows.
class DegenerateBatchError : public InputError {
 public:
  using InputError::InputError;
};

// Configuration could not be parsed or validated. `key()` names the
// offending dotted path.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string key, const std::string& message)
      : std::runtime_error("config error at '" + key + "': " + message), key_(std::move(key)) {}

  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

}  // namespace wavg
