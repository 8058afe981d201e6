#pragma once

#include <stdexcept>
#include <string>

namespace gdt {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual const char* kind() const noexcept { return "error"; }
};

/// Operand extents do not agree.
class DimensionError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "dimension"; }
};

/// A documented precondition or usage contract was violated.
class ContractError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "contract"; }
};

/// An index or value falls outside its permitted range.
class RangeError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "range"; }
};

/// Malformed, truncated or version-mismatched file contents.
class FormatError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "format"; }
};

/// Filesystem failures (missing files, unwritable paths).
class IoError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "io"; }
};

/// Training diverged or otherwise could not proceed.
class TrainingError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "training"; }
};

}  // namespace gdt
