#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace unimt {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Input bytes are not valid UTF-8.
class DecodeError : public Error {
 public:
  DecodeError(const std::string& what, std::size_t byte_offset)
      : Error(what), byte_offset_(byte_offset) {}
  std::size_t byte_offset() const noexcept { return byte_offset_; }

 private:
  std::size_t byte_offset_;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed record, manifest or other data file.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// A file could not be opened for reading.
class MissingFileError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class BuildError : public Error {
 public:
  using Error::Error;
};

class RangeError : public Error {
 public:
  RangeError(const std::string& what, std::size_t position)
      : Error(what), position_(position) {}
  std::size_t position() const noexcept { return position_; }

 private:
  std::size_t position_;
};

class ReframeError : public Error {
 public:
  using Error::Error;
};

/// Decoder output that does not start with a prompt token.
class MalformedOutputError : public Error {
 public:
  using Error::Error;
};

class BudgetError : public Error {
 public:
  using Error::Error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class StateError : public Error {
 public:
  using Error::Error;
};

/// Non-finite loss or gradient; carries the offending tensor name.
class NonFiniteError : public Error {
 public:
  using Error::Error;
};

}  // namespace unimt
