#pragma once

#include <stdexcept>
#include <string>

namespace percept {

// Failure classes. The CLI maps these onto exit codes.
enum class ErrorKind {
  Shape,        // incompatible tensor or layer shapes
  Argument,     // value outside an operation's domain
  Format,       // malformed or unsupported file contents
  Io,           // file system failure
  Config,       // configuration parse / validation failure
  Numerical,    // NaN or inf where finite values are required
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
  throw Error(kind, what);
}

inline void require(bool cond, ErrorKind kind, const char* what) {
  if (!cond) fail(kind, what);
}

// Prefer `if (!cond) fail(...)` on hot paths: this overload builds its
// message even when the check passes.
inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) fail(kind, what);
}

}  // namespace percept
