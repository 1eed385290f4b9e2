#pragma once

#include <stdexcept>
#include <string>

namespace cola {

// Shape or dimension disagreement between operands.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Invalid hyperparameters or configuration file contents.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// An API was called in a state where its result would be meaningless.
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// A non-finite value surfaced during evaluation or training.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace cola
