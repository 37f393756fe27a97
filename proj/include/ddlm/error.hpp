#pragma once

#include <stdexcept>
#include <string>

namespace ddlm {

// Root of every error thrown by the library. The CLI maps ConfigError to
// exit code 1 and everything else to exit code 2.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  using Error::Error;
};

class AssertionFailed : public Error {
 public:
  using Error::Error;
};

class UnknownSymbol : public Error {
 public:
  using Error::Error;
};

class CapacityExceeded : public Error {
 public:
  using Error::Error;
};

class DegenerateTime : public Error {
 public:
  using Error::Error;
};

class NonFiniteActivation : public Error {
 public:
  using Error::Error;
};

class NonFiniteGradient : public Error {
 public:
  using Error::Error;
};

class CacheOverflow : public Error {
 public:
  using Error::Error;
};

class TooLong : public Error {
 public:
  using Error::Error;
};

class NoMaskedPositions : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

class DivergenceDetected : public Error {
 public:
  DivergenceDetected(const std::string& what, std::string last_good)
      : Error(what), last_good_checkpoint(std::move(last_good)) {}
  std::string last_good_checkpoint;
};

class CollapseDetected : public Error {
 public:
  using Error::Error;
};

class MissingLog : public Error {
 public:
  using Error::Error;
};

}  // namespace ddlm
