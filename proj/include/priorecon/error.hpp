#pragma once

#include <stdexcept>
#include <string>

namespace priorecon {

enum class ErrorKind {
  InvalidInput,
  Configuration,
  DegenerateInput,
  Data,
  Checkpoint,
  Adapter,
  UndefinedTest,
  Runtime,
};

class Error : public std::runtime_error {
public:
  Error(ErrorKind kind, const std::string &what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string &what) { throw Error(kind, what); }

inline void require(bool cond, ErrorKind kind, const std::string &what) {
  if (!cond) fail(kind, what);
}

// CLI exit codes: 0 success, 2 configuration, 3 data, 4 runtime.
inline int exit_code(ErrorKind kind) {
  switch (kind) {
  case ErrorKind::Configuration:
  case ErrorKind::Checkpoint:
    return 2;
  case ErrorKind::InvalidInput:
  case ErrorKind::DegenerateInput:
  case ErrorKind::Data:
    return 3;
  default:
    return 4;
  }
}

} // namespace priorecon
