#pragma once

#include <stdexcept>
#include <string>

namespace stlb {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor extents that do not line up (channel mismatch, bad output extent, ...).
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration: architectures, hyperparameters, experiment specs.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed or inconsistent data: labels out of range, empty classes.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Malformed file contents. Carries the byte offset where parsing failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

/// Calling an operation outside of its contract (wrong mode, bad index).
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Switch records that do not belong to the tensor they are applied to.
class SwitchError : public Error {
 public:
  using Error::Error;
};

}  // namespace stlb
