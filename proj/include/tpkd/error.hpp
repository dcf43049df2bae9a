#pragma once

#include <stdexcept>
#include <string>

namespace tpkd {

/// Error categories shared by the C++ core and the C API.
enum class ErrorCode {
  kInvalidArgument = 1,
  kShapeMismatch = 2,
  kNoAlignment = 3,
  kOracleGuard = 4,
  kIo = 5,
  kCorruptFile = 6,
  kVersionMismatch = 7,
  kWrongStage = 8,
  kMissingTeacher = 9,
  kConfig = 10,
  kFrozenDrift = 11,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) {
  throw Error(code, what);
}

inline void require(bool cond, ErrorCode code, const std::string& what) {
  if (!cond) fail(code, what);
}

}  // namespace tpkd
