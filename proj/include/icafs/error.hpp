#pragma once

#include <stdexcept>
#include <string>

namespace icafs {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
  using Error::Error;
};

// NaN or Inf produced by an op, or handed to an optimizer.
struct NumericError : Error {
  using Error::Error;
};

struct DataError : Error {
  using Error::Error;
};

struct ProtocolError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

// A protocol contract broken at run time, such as selector parameters changing in Stage 3.
struct InvariantError : Error {
  using Error::Error;
};

}  // namespace icafs
