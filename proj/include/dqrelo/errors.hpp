#pragma once

#include <stdexcept>
#include <string>

namespace dqrelo {

/// Base class for every error thrown by this library.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// -- archive / container format errors ---------------------------------------

/// Malformed file header or structurally invalid metadata.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Tensor payload disagrees with its declared shape/dtype or fails validation.
class CorruptTensorError : public Error {
 public:
  using Error::Error;
};

/// Dtype not in the supported set (F16, BF16, F32).
class UnsupportedDtypeError : public Error {
 public:
  using Error::Error;
};

/// Filesystem-level failure (unreadable/unwritable path, short write).
class IoError : public Error {
 public:
  using Error::Error;
};

/// Container entry payload is damaged (bad length, failed checksum).
class CorruptEntryError : public Error {
 public:
  using Error::Error;
};

/// Container was produced against a different base archive.
class BaseMismatchError : public Error {
 public:
  using Error::Error;
};

// -- numeric errors -----------------------------------------------------------

/// Non-finite value where a finite one is required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Requested rank outside [1, min(n, m)].
class RankError : public Error {
 public:
  using Error::Error;
};

/// Iterative kernel failed to converge; carries the iteration count.
class ConvergenceError : public Error {
 public:
  ConvergenceError(const std::string& what, int iterations)
      : Error(what + " (after " + std::to_string(iterations) + " iterations)"),
        iterations_(iterations) {}
  int iterations() const { return iterations_; }

 private:
  int iterations_;
};

/// Incompatible matrix/vector dimensions.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// -- usage errors -------------------------------------------------------------

/// Two archives do not describe the same architecture (names/shapes differ).
class ArchitectureMismatchError : public Error {
 public:
  using Error::Error;
};

/// Operation requires at least one element.
class EmptyInputError : public Error {
 public:
  using Error::Error;
};

/// Retention is undefined when the fine-tuned score equals the base score.
class DegenerateBaselineError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration value or pattern.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace dqrelo
