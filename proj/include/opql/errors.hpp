#pragma once

#include <stdexcept>
#include <string>

namespace opql {

// Base class for all recoverable engine errors. The CLI maps these to
// exit code 2 (data/validation); anything else is an internal error (3).
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

class MissingMentionError : public Error {
 public:
  using Error::Error;
};

class SequenceTooLongError : public Error {
 public:
  using Error::Error;
};

class IndexOutOfRangeError : public Error {
 public:
  using Error::Error;
};

class UnknownEntityError : public Error {
 public:
  using Error::Error;
};

class UnknownRelationError : public Error {
 public:
  using Error::Error;
};

class HopOutOfRangeError : public Error {
 public:
  using Error::Error;
};

class EmptySetError : public Error {
 public:
  using Error::Error;
};

class EmptyIntermediateError : public Error {
 public:
  using Error::Error;
};

class EmptyMemoryError : public Error {
 public:
  using Error::Error;
};

class NoPositiveError : public Error {
 public:
  using Error::Error;
};

class LengthMismatchError : public Error {
 public:
  using Error::Error;
};

class InsufficientExamplesError : public Error {
 public:
  using Error::Error;
};

class NonFiniteGradientError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Corrupt or version-mismatched binary artifacts (checkpoints, memory snapshots).
class FormatError : public IoError {
 public:
  using IoError::IoError;
};

}  // namespace opql
