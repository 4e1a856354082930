#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace cpes {

enum class ErrorCode {
  DimensionMismatch,
  EmptyInput,
  IndexOutOfRange,
  InvalidConfig,
  InfeasibleConfig,
  InvalidStore,
  InsufficientClasses,
  InsufficientRecords,
  SelectionOutOfRange,
  NonFiniteGradient,
  UnknownRecord,
  IoFailure,
  BadMagic,
  UnsupportedVersion,
  TruncatedFile,
  TrailingData,
  NonFiniteValue,
};

std::string_view to_string(ErrorCode code) noexcept;

// I/O and on-disk format problems, as opposed to bad arguments or configs.
bool is_io_or_format(ErrorCode code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace cpes
