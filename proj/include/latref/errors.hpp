#pragma once

#include <stdexcept>
#include <string>

namespace latref {

// Configuration or programming errors (bad shapes, invalid hyperparameters).
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

// Input-data errors. The CLI maps every DataError to exit status 2.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class FormatError : public DataError {
 public:
  using DataError::DataError;
};

class CorruptionError : public DataError {
 public:
  using DataError::DataError;
};

class LengthError : public DataError {
 public:
  using DataError::DataError;
};

class EmptySequenceError : public DataError {
 public:
  using DataError::DataError;
};

class SelectionError : public DataError {
 public:
  using DataError::DataError;
};

}  // namespace latref
