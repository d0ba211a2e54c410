#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace dcs {

// Error taxonomy. The CLI maps these onto exit codes:
// ConfigError -> 2, CheckpointMismatch -> 3, everything else -> 1.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DimError : Error {
  using Error::Error;
};

// NaN/Inf surfaced by an op while numeric checks are enabled.
struct NumericFault : Error {
  using Error::Error;
};

// Zero-norm rows and similar mathematically invalid inputs.
struct DegenerateInput : Error {
  using Error::Error;
};

// Malformed on-disk data; carries the byte offset of the fault.
struct FormatError : Error {
  std::size_t byte_offset;
  FormatError(const std::string& msg, std::size_t offset)
      : Error(msg + " (byte offset " + std::to_string(offset) + ")"),
        byte_offset(offset) {}
};

struct ConfigError : Error {
  using Error::Error;
};

struct CheckpointMismatch : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

}  // namespace dcs
