#pragma once

#include <stdexcept>
#include <string>

namespace patchmoe {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Operand shapes or extents do not agree.
struct ShapeError : Error {
  using Error::Error;
};

/// NaN or Inf produced from finite inputs, or a diverging loss.
struct NumericError : Error {
  using Error::Error;
};

/// Malformed or missing input data (images, blobs, manifests).
struct DataError : Error {
  using Error::Error;
};

/// Invalid configuration or arguments.
struct UsageError : Error {
  using Error::Error;
};

/// A checkpoint was handed to a command that needs a different stage.
struct StageError : Error {
  using Error::Error;
};

}  // namespace patchmoe
