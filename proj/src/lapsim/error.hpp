#pragma once

#include <stdexcept>
#include <string>

namespace lapsim {

// Every failure the core can report. The numeric values are mirrored by the
// C API status codes, so append only.
enum class ErrorCode {
  InvalidArgument = 1,
  WrongMarkerCount,
  AmbiguousOrdering,
  MarkerOutOfView,
  TissueMoving,
  ShapeMismatch,
  DomainError,
  NonFiniteGradient,
  WindowTooShort,
  MissingGroundTruth,
  NonPositiveVelocity,
  NonPositivePeriod,
  DegenerateGeometry,
  MarkersMissing,
  MarkerSetMismatch,
  InsertionTooDeep,
  PivotLimitExceeded,
  BiteMissedTissue,
  RcmViolation,
  StitchInFlight,
  InvalidCommandForState,
  PolicyStuck,
  DatasetTooSmall,
  CardinalityMismatch,
  TooFewStitches,
  EdgeUnavailable,
  EmptySample,
  IncompleteLog,
  InvalidScenario,
  UnknownSession,
  SchemaVersionMismatch,
  CorruptLog,
  MissingWeights,
  IoError,
  ToolFailure,
  FewerPeaksThanRequested,
};

const char* error_name(ErrorCode code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(error_name(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

}  // namespace lapsim
