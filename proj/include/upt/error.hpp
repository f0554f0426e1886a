#pragma once

#include <stdexcept>
#include <string>

namespace upt {

// Base of every error raised by the library. The CLI maps the concrete
// subclasses onto its documented exit codes.
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

class StateError : public Error {
 public:
  using Error::Error;
};

class LabelError : public Error {
 public:
  using Error::Error;
};

class EvaluationError : public Error {
 public:
  using Error::Error;
};

class ContractError : public Error {
 public:
  using Error::Error;
};

// Raised by the finite-difference checker when the probed function is not
// reproducible at the probe point.
class OracleError : public Error {
 public:
  using Error::Error;
};

class FingerprintError : public Error {
 public:
  using Error::Error;
};

class CorruptArchiveError : public Error {
 public:
  using Error::Error;
};

}  // namespace upt
