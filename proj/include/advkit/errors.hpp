#pragma once

#include <stdexcept>
#include <string>

namespace advkit {

/// Root of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes do not conform to an operation's contract.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A class label or element index is out of range.
class IndexError : public Error {
 public:
  using Error::Error;
};

/// An API was used out of order (e.g. a second backward pass on one tape).
class UsageError : public Error {
 public:
  using Error::Error;
};

/// A non-finite value appeared in a tensor produced by a public operation.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// User-provided configuration is incoherent. The CLI maps it to exit code 1.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Consecutive layers of an architecture are not shape-compatible.
class ArchitectureError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

/// Transform parameters violate their invariants.
class ParameterError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Checkpoint load failures.
class CheckpointError : public Error {
 public:
  using Error::Error;
};
class ChecksumError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class VersionError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class TruncatedError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class FormatError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

// IDX parse failures.
class IdxError : public Error {
 public:
  using Error::Error;
};
class IdxMagicError : public IdxError {
 public:
  using IdxError::IdxError;
};
class IdxCountMismatchError : public IdxError {
 public:
  using IdxError::IdxError;
};
class IdxTruncatedError : public IdxError {
 public:
  using IdxError::IdxError;
};

/// Not enough examples pass the correctly-classified filter.
class SelectionError : public Error {
 public:
  SelectionError(const std::string& what, std::size_t qualified)
      : Error(what), qualified_(qualified) {}
  std::size_t qualified() const noexcept { return qualified_; }

 private:
  std::size_t qualified_;
};

}  // namespace advkit
