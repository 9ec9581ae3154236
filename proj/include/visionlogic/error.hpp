#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace visionlogic {

enum class ErrorKind {
  MissingFile,
  MissingArtifact,
  ShapeMismatch,
  NonFiniteValue,
  ChecksumMismatch,
  IoError,
  ParseError,
  ChannelOutOfRange,
  EmptyVector,
  LengthMismatch,
  EmptyClass,
  EmptyActiveSet,
  TooSmall,
  PredicateInactive,
  NeverDeactivates,
  Diverged,
  InvalidArgument,
  InvariantViolation,
};

[[nodiscard]] inline std::string_view to_string(ErrorKind k) {
  switch (k) {
    case ErrorKind::MissingFile: return "MissingFile";
    case ErrorKind::MissingArtifact: return "MissingArtifact";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::NonFiniteValue: return "NonFiniteValue";
    case ErrorKind::ChecksumMismatch: return "ChecksumMismatch";
    case ErrorKind::IoError: return "IoError";
    case ErrorKind::ParseError: return "ParseError";
    case ErrorKind::ChannelOutOfRange: return "ChannelOutOfRange";
    case ErrorKind::EmptyVector: return "EmptyVector";
    case ErrorKind::LengthMismatch: return "LengthMismatch";
    case ErrorKind::EmptyClass: return "EmptyClass";
    case ErrorKind::EmptyActiveSet: return "EmptyActiveSet";
    case ErrorKind::TooSmall: return "TooSmall";
    case ErrorKind::PredicateInactive: return "PredicateInactive";
    case ErrorKind::NeverDeactivates: return "NeverDeactivates";
    case ErrorKind::Diverged: return "Diverged";
    case ErrorKind::InvalidArgument: return "InvalidArgument";
    case ErrorKind::InvariantViolation: return "InvariantViolation";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  [[nodiscard]] ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

}  // namespace visionlogic
