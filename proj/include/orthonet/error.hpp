#pragma once

#include <stdexcept>
#include <string>

namespace orthonet {

// Base of every domain error raised by the library. The CLI maps these to
// exit status 1.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ValueError : public Error {
 public:
  using Error::Error;
};

// Training diverged (non-finite loss). Carries where it happened.
class DivergenceError : public Error {
 public:
  DivergenceError(int epoch, int batch, const std::string& what)
      : Error(what), epoch_(epoch), batch_(batch) {}
  int epoch() const { return epoch_; }
  int batch() const { return batch_; }

 private:
  int epoch_;
  int batch_;
};

enum class FormatErrorKind {
  kIo,
  kBadMagic,
  kBadVersion,
  kTruncated,
  kCountMismatch,
  kShapeMismatch,
  kBadDtype,
  kArchMismatch,
  kMalformed,
};

const char* to_string(FormatErrorKind kind);

// Malformed or unreadable file. `field` names the offending part of the
// layout ("magic", "version", "tensor layer0.weight", ...).
class FormatError : public Error {
 public:
  FormatError(FormatErrorKind kind, std::string field, const std::string& detail)
      : Error(std::string(to_string(kind)) + " (" + field + "): " + detail),
        kind_(kind),
        field_(std::move(field)) {}
  FormatErrorKind kind() const { return kind_; }
  const std::string& field() const { return field_; }

 private:
  FormatErrorKind kind_;
  std::string field_;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace orthonet
