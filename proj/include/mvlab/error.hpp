#pragma once

#include <stdexcept>
#include <string>

namespace mvlab {

// Error taxonomy. Each subsystem throws one of these; the CLI maps them to
// process exit codes.

/// Operand shapes do not line up.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// A caller broke a documented precondition.
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

/// Bad input data (token id out of range, empty representation, ...).
struct InputError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Inconsistent configuration or data sources.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Training produced a non-finite loss or gradient.
struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Filesystem or format failure while reading/writing artifacts.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace mvlab
