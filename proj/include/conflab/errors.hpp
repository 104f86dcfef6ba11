#pragma once

#include <stdexcept>
#include <string>

namespace conflab {

enum class ErrorCode {
  NonPositiveWarp,
  GeometryMismatch,
  UnsupportedOnBackend,
  NotTransverse,
  NonPositiveInput,
  BracketFailure,
  NoConvergence,
  SingularJacobian,
  NonPositivePsi,
  OrderingViolation,
  DegenerateRescale,
  ZeroField,
  NonPositiveC,
  MissingCertificate,
  ConfigError,
};

inline const char* to_string(ErrorCode c) {
  switch (c) {
    case ErrorCode::NonPositiveWarp: return "NonPositiveWarp";
    case ErrorCode::GeometryMismatch: return "GeometryMismatch";
    case ErrorCode::UnsupportedOnBackend: return "UnsupportedOnBackend";
    case ErrorCode::NotTransverse: return "NotTransverse";
    case ErrorCode::NonPositiveInput: return "NonPositiveInput";
    case ErrorCode::BracketFailure: return "BracketFailure";
    case ErrorCode::NoConvergence: return "NoConvergence";
    case ErrorCode::SingularJacobian: return "SingularJacobian";
    case ErrorCode::NonPositivePsi: return "NonPositivePsi";
    case ErrorCode::OrderingViolation: return "OrderingViolation";
    case ErrorCode::DegenerateRescale: return "DegenerateRescale";
    case ErrorCode::ZeroField: return "ZeroField";
    case ErrorCode::NonPositiveC: return "NonPositiveC";
    case ErrorCode::MissingCertificate: return "MissingCertificate";
    case ErrorCode::ConfigError: return "ConfigError";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace conflab
