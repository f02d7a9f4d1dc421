#pragma once

#include <stdexcept>
#include <string>

namespace lfsum {

// Failure categories; mirrored one-to-one by the lfsum_status codes of the
// public C API.
enum class ErrorCode {
  invalid_argument,
  io,
  corpus,
  shape,
  state,
  numeric,
  internal,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}
  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& msg) {
  throw Error(code, msg);
}

}  // namespace lfsum
