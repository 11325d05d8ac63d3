#pragma once

#include <stdexcept>
#include <string>

namespace sae {

struct SchemaError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IntegrityError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DesignError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct LookupError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct SingularityError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IdentifiabilityError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct FitError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct EvaluationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace sae
