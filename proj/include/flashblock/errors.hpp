#pragma once

#include <stdexcept>
#include <string>

namespace flashblock {

/// Tensor or vector dimensions do not agree with what the operation expects.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Index or token range outside the valid extent.
class BoundsError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

/// Both sides of a merge are empty for the same query row.
class DegenerateInputError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Cached block-external attention cannot be reused; caller must recompute.
class ReusePreconditionError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// A sparse mask was applied to a block other than the one it was built for.
class StalenessError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Configuration value outside its documented domain.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class CalibrationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace flashblock
