#pragma once

#include <stdexcept>
#include <string>

namespace ff {

// Base for every error raised by the library. Messages are single-line so the
// CLI can forward them verbatim.
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

class NumericError : public Error {
 public:
  using Error::Error;
};

// Malformed pose / config / report documents. `field` is a JSON-pointer-like
// path ("clips[2].frames_2d[4]") or empty when the document itself is broken.
class FormatError : public Error {
 public:
  FormatError(std::string field, const std::string& what)
      : Error(field.empty() ? what : field + ": " + what), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

}  // namespace ff
