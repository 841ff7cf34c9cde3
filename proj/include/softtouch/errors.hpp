#pragma once

#include <stdexcept>
#include <string>

namespace softtouch {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Inconsistent dimensions, out-of-range settings, malformed config files.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Non-finite inputs or activations, solver breakdown.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Bad magic, unsupported version, unparsable container.
class FormatError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class CorruptionError : public Error {
 public:
  using Error::Error;
};

// Non-monotone timestamps or sequence numbers.
class OrderingError : public Error {
 public:
  using Error::Error;
};

class NotReadyError : public Error {
 public:
  using Error::Error;
};

class SchedulingError : public Error {
 public:
  using Error::Error;
};

class SessionError : public Error {
 public:
  using Error::Error;
};

class UsageError : public Error {
 public:
  using Error::Error;
};

// Scripted expert could not complete a task; carries a phase trace in what().
class GenerationError : public Error {
 public:
  using Error::Error;
};

}  // namespace softtouch
