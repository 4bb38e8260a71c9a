#pragma once

#include <stdexcept>
#include <string>

namespace boneik {

/// Base of every exception thrown by the library. `is_io()` lets callers
/// separate file-system failures from validation or numerical failures.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual bool is_io() const noexcept { return false; }
};

class IoError : public Error {
 public:
  using Error::Error;
  bool is_io() const noexcept override { return true; }
};

class ParseError : public Error {
 public:
  using Error::Error;
};

/// Rig topology violations (cycles, ordering, zero-length bones, unknown names).
class TopologyError : public Error {
 public:
  using Error::Error;
};

/// Rest frame could not be built because both references are collinear
/// with the bone axis.
class DegenerateFrameError : public Error {
 public:
  using Error::Error;
};

/// Input too degenerate for a numerical routine (6D conversion, alignment).
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Training loss became non-finite.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace boneik
