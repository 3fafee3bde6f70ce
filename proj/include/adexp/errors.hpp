#pragma once

#include <stdexcept>
#include <string>

namespace adexp {

struct NotSymmetric : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IndefiniteMatrix : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct SingularMatrix : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DimensionMismatch : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct EmptyBatch : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct InfeasibleConstraint : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DegeneratePosterior : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct MalformedInstance : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericalFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct MissingBaseline : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace adexp
