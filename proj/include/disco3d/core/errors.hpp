#pragma once

#include <stdexcept>

namespace disco3d {

/// A loss or state became NaN or infinite.
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace disco3d
