#include "lapsim/error.hpp"

namespace lapsim {

const char* error_name(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::WrongMarkerCount: return "WrongMarkerCount";
    case ErrorCode::AmbiguousOrdering: return "AmbiguousOrdering";
    case ErrorCode::MarkerOutOfView: return "MarkerOutOfView";
    case ErrorCode::TissueMoving: return "TissueMoving";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::DomainError: return "DomainError";
    case ErrorCode::NonFiniteGradient: return "NonFiniteGradient";
    case ErrorCode::WindowTooShort: return "WindowTooShort";
    case ErrorCode::MissingGroundTruth: return "MissingGroundTruth";
    case ErrorCode::NonPositiveVelocity: return "NonPositiveVelocity";
    case ErrorCode::NonPositivePeriod: return "NonPositivePeriod";
    case ErrorCode::DegenerateGeometry: return "DegenerateGeometry";
    case ErrorCode::MarkersMissing: return "MarkersMissing";
    case ErrorCode::MarkerSetMismatch: return "MarkerSetMismatch";
    case ErrorCode::InsertionTooDeep: return "InsertionTooDeep";
    case ErrorCode::PivotLimitExceeded: return "PivotLimitExceeded";
    case ErrorCode::BiteMissedTissue: return "BiteMissedTissue";
    case ErrorCode::RcmViolation: return "RcmViolation";
    case ErrorCode::StitchInFlight: return "StitchInFlight";
    case ErrorCode::InvalidCommandForState: return "InvalidCommandForState";
    case ErrorCode::PolicyStuck: return "PolicyStuck";
    case ErrorCode::DatasetTooSmall: return "DatasetTooSmall";
    case ErrorCode::CardinalityMismatch: return "CardinalityMismatch";
    case ErrorCode::TooFewStitches: return "TooFewStitches";
    case ErrorCode::EdgeUnavailable: return "EdgeUnavailable";
    case ErrorCode::EmptySample: return "EmptySample";
    case ErrorCode::IncompleteLog: return "IncompleteLog";
    case ErrorCode::InvalidScenario: return "InvalidScenario";
    case ErrorCode::UnknownSession: return "UnknownSession";
    case ErrorCode::SchemaVersionMismatch: return "SchemaVersionMismatch";
    case ErrorCode::CorruptLog: return "CorruptLog";
    case ErrorCode::MissingWeights: return "MissingWeights";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::ToolFailure: return "ToolFailure";
    case ErrorCode::FewerPeaksThanRequested: return "FewerPeaksThanRequested";
  }
  return "Unknown";
}

}  // namespace lapsim
