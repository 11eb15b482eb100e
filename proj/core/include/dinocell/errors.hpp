#pragma once

#include <stdexcept>
#include <string>

namespace dinocell {

// Base of everything the library throws. UserError subclasses are caused by
// bad inputs (configs, files, arguments); the rest indicate broken state.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class UserError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public UserError {
 public:
  using UserError::UserError;
};

class ConfigError : public UserError {
 public:
  using UserError::UserError;
};

class FormatError : public UserError {
 public:
  using UserError::UserError;
};

class ChecksumError : public FormatError {
 public:
  using FormatError::FormatError;
};

class IoError : public UserError {
 public:
  using UserError::UserError;
};

// Non-finite values or an invalid numeric state reached during computation.
class NumericError : public Error {
 public:
  using Error::Error;
};

class GraphError : public Error {
 public:
  using Error::Error;
};

// Evaluation data crossed a train/test boundary.
class LeakageError : public Error {
 public:
  using Error::Error;
};

}  // namespace dinocell
