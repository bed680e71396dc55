#pragma once

#include <stdexcept>
#include <string>

namespace lift3d {

/// Base of every library failure. `exit_code()` is the CLI's process exit
/// status for this kind of failure.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual int exit_code() const { return 1; }
};

class ConfigError : public Error {
 public:
  using Error::Error;
  int exit_code() const override { return 2; }
};

class IoError : public Error {
 public:
  using Error::Error;
  int exit_code() const override { return 3; }
};

/// Dataset or checkpoint bytes that fail validation (bad magic, truncated
/// blob, CRC mismatch, manifest inconsistency).
class FormatError : public IoError {
 public:
  using IoError::IoError;
};

class NonFiniteLossError : public Error {
 public:
  using Error::Error;
  int exit_code() const override { return 4; }
};

class CheckpointMismatchError : public Error {
 public:
  using Error::Error;
  int exit_code() const override { return 5; }
};

/// Precondition violations on library calls (empty clouds, m > N, ...).
class InvalidArgument : public Error {
 public:
  using Error::Error;
  int exit_code() const override { return 2; }
};

}  // namespace lift3d
