#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace vptd {

enum class ErrorKind {
  MalformedRecord,
  InconsistentVocab,
  BadMagic,
  TruncatedFile,
  NonFiniteValue,
  InvalidSpec,
  InvalidConfig,
  NonFiniteActivation,
  NonFiniteGradient,
  NoPositivePairs,
  EdgelessGraph,
  DivergedTraining,
  InvalidClusterSize,
  OutOfRangeToken,
  NoHallucinations,
  EmptyTruth,
  NoResponsesWithObjects,
  DimensionMismatch,
  MissingToken,
  IoError,
};

inline std::string_view error_name(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::MalformedRecord: return "MalformedRecord";
    case ErrorKind::InconsistentVocab: return "InconsistentVocab";
    case ErrorKind::BadMagic: return "BadMagic";
    case ErrorKind::TruncatedFile: return "TruncatedFile";
    case ErrorKind::NonFiniteValue: return "NonFiniteValue";
    case ErrorKind::InvalidSpec: return "InvalidSpec";
    case ErrorKind::InvalidConfig: return "InvalidConfig";
    case ErrorKind::NonFiniteActivation: return "NonFiniteActivation";
    case ErrorKind::NonFiniteGradient: return "NonFiniteGradient";
    case ErrorKind::NoPositivePairs: return "NoPositivePairs";
    case ErrorKind::EdgelessGraph: return "EdgelessGraph";
    case ErrorKind::DivergedTraining: return "DivergedTraining";
    case ErrorKind::InvalidClusterSize: return "InvalidClusterSize";
    case ErrorKind::OutOfRangeToken: return "OutOfRangeToken";
    case ErrorKind::NoHallucinations: return "NoHallucinations";
    case ErrorKind::EmptyTruth: return "EmptyTruth";
    case ErrorKind::NoResponsesWithObjects: return "NoResponsesWithObjects";
    case ErrorKind::DimensionMismatch: return "DimensionMismatch";
    case ErrorKind::MissingToken: return "MissingToken";
    case ErrorKind::IoError: return "IoError";
  }
  return "Unknown";
}

/// Every failure raised by the library. `what()` is "<Kind>: <detail>".
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& detail)
      : std::runtime_error(std::string(error_name(kind)) + ": " + detail), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }
  std::string_view name() const noexcept { return error_name(kind_); }

 private:
  ErrorKind kind_;
};

}  // namespace vptd
