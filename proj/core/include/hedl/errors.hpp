#pragma once

#include <stdexcept>
#include <string>

namespace hedl {

// Base for all library errors. Subclasses map onto CLI exit codes:
// ConfigError/ShapeError/ContractError -> 1, TrainingError -> 2, IoError -> 3.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& msg) : Error(msg) {}
};

class ContractError : public Error {
 public:
  explicit ContractError(const std::string& msg) : Error(msg) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

class TrainingError : public Error {
 public:
  explicit TrainingError(const std::string& msg) : Error(msg) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& msg) : Error(msg) {}
};

}  // namespace hedl
