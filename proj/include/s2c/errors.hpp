#pragma once

#include <stdexcept>
#include <string>

namespace s2c {

// All library failures derive from Error so callers can map them to exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

// Structural problem in a series network (cycle, dangling edge, junction mismatch).
class GraphError : public Error {
 public:
  using Error::Error;
};

// Two objects that must agree (cache vs network, plan vs network, key sets) do not.
class ConsistencyError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class PreservationError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  enum class Kind { io, bad_magic, version_mismatch, precision_mismatch, truncated, index_inconsistent, malformed_header };

  CheckpointError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

}  // namespace s2c
