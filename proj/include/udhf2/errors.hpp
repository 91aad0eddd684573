#pragma once

#include <stdexcept>
#include <string>

namespace udhf2 {

/// Shape or axis contract violated by an operation's inputs.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A numeric argument lies outside its allowed range.
class ParameterError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// The API was called in a state where the request makes no sense
/// (e.g. backward on a tensor that was never recorded).
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Inconsistent or incomplete run configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed file contents (checkpoints, rasters, manifests).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Streams of the two frequency domains do not line up.
class StructuralError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace udhf2
