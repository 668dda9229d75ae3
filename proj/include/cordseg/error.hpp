#pragma once

#include <stdexcept>
#include <string>

namespace cordseg {

// Error hierarchy. The CLI maps each family onto a stable exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid arguments, configuration values or incompatible inputs.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Tensor / image shape disagreement.
class ShapeError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

// Unreadable, unwritable or missing files.
class IoError : public Error {
 public:
  using Error::Error;
};

// File content that is corrupt or outside the supported subset.
class FormatError : public IoError {
 public:
  using IoError::IoError;
};

// Required masks or subjects are missing from a dataset.
class MissingDataError : public Error {
 public:
  using Error::Error;
};

// The centerline network found no cord voxel in the input.
class NoCordFound : public Error {
 public:
  NoCordFound() : Error("no cord found") {}
  explicit NoCordFound(const std::string& what) : Error(what) {}
};

}  // namespace cordseg
