#pragma once

#include <stdexcept>
#include <string>

namespace versemi {

enum class ErrorCode {
  invalid_argument,
  out_of_range,
  missing_file,
  truncated_file,
  header_mismatch,
  non_binary_mask,
  io_failure,
  checkpoint_mismatch,
  undefined_surface_metric,
  non_finite_loss,
};

// Process exit classes: 1 validation, 2 I/O, 3 numerical.
inline int exit_category(ErrorCode code) {
  switch (code) {
    case ErrorCode::invalid_argument:
    case ErrorCode::out_of_range:
    case ErrorCode::undefined_surface_metric:
      return 1;
    case ErrorCode::missing_file:
    case ErrorCode::truncated_file:
    case ErrorCode::header_mismatch:
    case ErrorCode::non_binary_mask:
    case ErrorCode::io_failure:
    case ErrorCode::checkpoint_mismatch:
      return 2;
    case ErrorCode::non_finite_loss:
      return 3;
  }
  return 1;
}

inline const char* error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::invalid_argument: return "invalid-argument";
    case ErrorCode::out_of_range: return "out-of-range";
    case ErrorCode::missing_file: return "missing-file";
    case ErrorCode::truncated_file: return "truncated-file";
    case ErrorCode::header_mismatch: return "header-mismatch";
    case ErrorCode::non_binary_mask: return "non-binary-mask";
    case ErrorCode::io_failure: return "io-failure";
    case ErrorCode::checkpoint_mismatch: return "checkpoint-mismatch";
    case ErrorCode::undefined_surface_metric: return "undefined-surface-metric";
    case ErrorCode::non_finite_loss: return "non-finite-loss";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& msg)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + msg), code_(code) {}
  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& msg) { throw Error(code, msg); }

inline void require(bool cond, ErrorCode code, const std::string& msg) {
  if (!cond) fail(code, msg);
}

}  // namespace versemi
