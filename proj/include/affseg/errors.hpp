#pragma once

#include <stdexcept>
#include <string>

namespace affseg {

// Tensor dimensions disagree with what an operation requires.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Non-finite values where finite ones are required (NaN loss, inf gradient).
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Malformed or unreadable files (config JSON, checkpoints).
struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Dataset content problems: orphan files, out-of-range labels, bad targets.
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace affseg
