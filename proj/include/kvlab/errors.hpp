#pragma once

#include <stdexcept>
#include <string>

namespace kvlab {

// Invalid or out-of-range configuration value.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Bad runtime input (out-of-vocab token, empty response, ...).
struct InputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Structurally inconsistent data (key mismatch, length mismatch, ...).
struct StructuralError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Training-loop failure; carries the step at which it occurred.
struct TrainingError : std::runtime_error {
  TrainingError(const std::string& what, int at_step)
      : std::runtime_error(what + " (step " + std::to_string(at_step) + ")"), step(at_step) {}
  int step;
};

}  // namespace kvlab
