#pragma once

#include <stdexcept>
#include <string>

namespace boneage {

/// Base class for everything this library throws on purpose.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor/image dimension mismatches. Messages always name both shapes.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid argument or configuration value.
class ValueError : public Error {
 public:
  using Error::Error;
};

/// Mask extraction found no foreground (unusable radiograph).
class EmptyForegroundError : public Error {
 public:
  using Error::Error;
};

/// Missing/unreadable files, malformed CSV or image data.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Training loss became non-finite.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

class BadMagicError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

class BadVersionError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

class TruncatedError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

class ConfigMismatchError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

}  // namespace boneage
