// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace scob {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes or grid extents that do not line up.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// A caller broke a documented precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Invalid hyperparameter or dataset description.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Dataset content violates a labeling invariant.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Index outside its valid range.
class BoundsError : public Error {
 public:
  using Error::Error;
};

/// Malformed, truncated or version-mismatched file.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Finite-difference oracle detected a non-deterministic function.
class OracleError : public Error {
 public:
  using Error::Error;
};

/// Metric undefined for the given labels.
class MetricError : public Error {
 public:
  using Error::Error;
};

}  // namespace scob
