#pragma once

#include <stdexcept>
#include <string>

namespace mambaseg {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Incompatible tensor extents.
struct DimensionError : Error {
  using Error::Error;
};

// Invalid hyperparameters or layer configuration.
struct ConfigError : Error {
  using Error::Error;
};

// API misuse (backward on a non-scalar, empty inputs, ...).
struct UsageError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

struct PairingError : Error {
  using Error::Error;
};

struct CheckpointError : Error {
  using Error::Error;
};

// Optimizer state no longer matches the parameters it tracks.
struct StateError : Error {
  using Error::Error;
};

// Non-finite loss during training.
struct NumericError : Error {
  using Error::Error;
};

}  // namespace mambaseg
