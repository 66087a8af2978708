#pragma once

#include <stdexcept>
#include <string>

namespace endofuse {

// Shapes of operands do not agree.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A scalar hyperparameter is out of its legal range.
class ParameterError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Input data violates a documented contract (labels, ids, ...).
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// API misuse, e.g. backward on a consumed tape.
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed file contents (CSV, checkpoint, PNG).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Column sets disagree between a table and the statistics/checkpoint applied to it.
class SchemaError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A texture statistic has no defined value on the given region.
class FeatureUndefined : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class RegionTooSmall : public FeatureUndefined {
 public:
  using FeatureUndefined::FeatureUndefined;
};

}  // namespace endofuse
