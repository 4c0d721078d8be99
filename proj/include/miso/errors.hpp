#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace miso {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape mismatch between operands.
struct DimensionError : Error {
  using Error::Error;
};

// Caller passed an argument outside the operation's domain.
struct ArgumentError : Error {
  using Error::Error;
};

// Model / run configuration is inconsistent.
struct ConfigError : Error {
  using Error::Error;
};

// A query row had no key it was allowed to attend to.
struct UndefinedAttentionError : Error {
  using Error::Error;
};

// Finite-difference oracle saw a non-finite function value.
struct OracleError : Error {
  using Error::Error;
};

// Violated internal contract (cache from a different forward pass, etc).
struct InternalError : Error {
  using Error::Error;
};

struct NumericError : Error {
  using Error::Error;
};

struct TokenizeError : Error {
  using Error::Error;
};

struct ValidationError : Error {
  using Error::Error;
};

struct GeneratorError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

// Checkpoint decoding failure; offset is the byte position where parsing stopped.
struct LoadError : Error {
  LoadError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset(offset) {}
  std::size_t offset;
};

}  // namespace miso
