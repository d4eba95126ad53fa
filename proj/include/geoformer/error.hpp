#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace geoformer {

/// Base of every error thrown by the library. The CLI maps these to exit
/// code 2; usage problems are reported before any of them can be raised.
class Error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

class ParseError : public Error {
  public:
    ParseError(std::size_t line, const std::string& what)
        : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
    std::size_t line() const { return line_; }

  private:
    std::size_t line_;
};

class RangeError : public Error {
  public:
    using Error::Error;
};

class DuplicateError : public Error {
  public:
    using Error::Error;
};

class ConfigError : public Error {
  public:
    using Error::Error;
};

class ShapeError : public Error {
  public:
    using Error::Error;
};

class DecodeError : public Error {
  public:
    using Error::Error;
};

class CheckpointError : public Error {
  public:
    using Error::Error;
};

class NumericError : public Error {
  public:
    using Error::Error;
};

} // namespace geoformer
