#include "cpes/error.hpp"

namespace cpes {

std::string_view to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::IndexOutOfRange: return "IndexOutOfRange";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::InfeasibleConfig: return "InfeasibleConfig";
    case ErrorCode::InvalidStore: return "InvalidStore";
    case ErrorCode::InsufficientClasses: return "InsufficientClasses";
    case ErrorCode::InsufficientRecords: return "InsufficientRecords";
    case ErrorCode::SelectionOutOfRange: return "SelectionOutOfRange";
    case ErrorCode::NonFiniteGradient: return "NonFiniteGradient";
    case ErrorCode::UnknownRecord: return "UnknownRecord";
    case ErrorCode::IoFailure: return "IoFailure";
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::UnsupportedVersion: return "UnsupportedVersion";
    case ErrorCode::TruncatedFile: return "TruncatedFile";
    case ErrorCode::TrailingData: return "TrailingData";
    case ErrorCode::NonFiniteValue: return "NonFiniteValue";
  }
  return "Unknown";
}

bool is_io_or_format(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::IoFailure:
    case ErrorCode::BadMagic:
    case ErrorCode::UnsupportedVersion:
    case ErrorCode::TruncatedFile:
    case ErrorCode::TrailingData:
    case ErrorCode::NonFiniteValue:
      return true;
    default:
      return false;
  }
}

}  // namespace cpes
