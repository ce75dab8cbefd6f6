#pragma once

#include <stdexcept>
#include <string>

namespace somnolog {

// Numeric values are mirrored by somnolog_status in somnolog.h.
enum class ErrorCode {
  InvalidArgument = 1,
  Io = 2,
  Parse = 3,
  Contract = 4,
  Numeric = 5,
  UnknownStage = 6,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

const char* error_code_name(ErrorCode code) noexcept;

}  // namespace somnolog
