#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace diffwave {

enum class ErrorKind {
  Config,      // invalid arguments, shapes, or run configuration
  Io,          // filesystem and format failures
  Numeric,     // NaN/Inf during training or sampling
  Validation,  // warnings escalated to errors
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Config: return "config";
    case ErrorKind::Io: return "io";
    case ErrorKind::Numeric: return "numeric";
    case ErrorKind::Validation: return "validation";
  }
  return "unknown";
}

/// Process exit status for each category.
inline int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Config: return 2;
    case ErrorKind::Io: return 3;
    case ErrorKind::Numeric: return 4;
    case ErrorKind::Validation: return 5;
  }
  return 1;
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, const std::string& what) {
  if (!cond) fail(ErrorKind::Config, what);
}

}  // namespace diffwave
