#pragma once

#include <stdexcept>
#include <string>

namespace adaptsp {

// Failure classes map one-to-one onto CLI exit codes.
enum class ErrorKind {
  validation = 2,   // malformed input, shape/id mismatch, bad parameter
  degenerate = 3,   // numerical degeneracy (zero variance, non-convergence)
  internal = 4,     // invariant violated inside the toolkit
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }
  int exit_code() const noexcept { return static_cast<int>(kind_); }

 private:
  ErrorKind kind_;
};

inline Error validation_error(const std::string& what) {
  return Error(ErrorKind::validation, what);
}

inline Error degenerate_error(const std::string& what) {
  return Error(ErrorKind::degenerate, what);
}

inline Error internal_error(const std::string& what) {
  return Error(ErrorKind::internal, what);
}

}  // namespace adaptsp
