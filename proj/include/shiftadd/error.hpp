#pragma once

#include <stdexcept>
#include <string>

namespace shiftadd {

enum class ErrorKind {
  Validation,  // bad arguments, inconsistent shapes, duplicate names
  Degeneracy,  // singular systems, failed factorizations
  Format,      // malformed file header or unknown enum values
  Integrity,   // truncated or inconsistent payloads
  Io,          // open/read/write failures
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Validation: return "validation";
    case ErrorKind::Degeneracy: return "degeneracy";
    case ErrorKind::Format: return "format";
    case ErrorKind::Integrity: return "integrity";
    case ErrorKind::Io: return "io";
  }
  return "unknown";
}

/// Process exit code used by the command line tool for each error kind.
/// Format and integrity problems are reported as I/O failures.
inline int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Validation: return 2;
    case ErrorKind::Degeneracy: return 3;
    case ErrorKind::Format:
    case ErrorKind::Integrity:
    case ErrorKind::Io: return 4;
  }
  return 1;
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

inline void require(bool condition, const std::string& message) {
  if (!condition) fail(ErrorKind::Validation, message);
}

}  // namespace shiftadd
