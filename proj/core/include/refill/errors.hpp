#pragma once

#include <stdexcept>

namespace refill {

/// Invalid input, shape, or configuration. CLI maps this to exit code 2.
struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Checkpoint or config identity mismatch. CLI maps this to exit code 3.
struct ArtifactMismatch : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Numeric failure: divergence, non-convergence, missing gradients.
/// CLI maps this to exit code 4.
struct NumericFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace refill
