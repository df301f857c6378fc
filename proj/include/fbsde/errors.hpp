#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace fbsde {

enum class ErrorCode {
  InvalidArgument,
  ConfigParse,
  UnknownFunctionName,
  DimensionMismatch,
  NonPositiveSigma,
  SimulationDiverged,
  WeightCollapse,
  GridMismatch,
  MissingTruthPath,
  LinearSolveFailure,
  PolicyIterationDiverged,
  RiccatiBlowup,
  ResamplingForbiddenInEstimatorMode,
  FixedPointNotConverged,
  ModeModelMismatch,
  IterationNotConverged,
  FilterDivergence,
  Io,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::ConfigParse: return "ConfigParse";
    case ErrorCode::UnknownFunctionName: return "UnknownFunctionName";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::NonPositiveSigma: return "NonPositiveSigma";
    case ErrorCode::SimulationDiverged: return "SimulationDiverged";
    case ErrorCode::WeightCollapse: return "WeightCollapse";
    case ErrorCode::GridMismatch: return "GridMismatch";
    case ErrorCode::MissingTruthPath: return "MissingTruthPath";
    case ErrorCode::LinearSolveFailure: return "LinearSolveFailure";
    case ErrorCode::PolicyIterationDiverged: return "PolicyIterationDiverged";
    case ErrorCode::RiccatiBlowup: return "RiccatiBlowup";
    case ErrorCode::ResamplingForbiddenInEstimatorMode: return "ResamplingForbiddenInEstimatorMode";
    case ErrorCode::FixedPointNotConverged: return "FixedPointNotConverged";
    case ErrorCode::ModeModelMismatch: return "ModeModelMismatch";
    case ErrorCode::IterationNotConverged: return "IterationNotConverged";
    case ErrorCode::FilterDivergence: return "FilterDivergence";
    case ErrorCode::Io: return "Io";
  }
  return "Unknown";
}

// All library failures carry a machine-readable code; the CLI maps it to an exit status.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  [[nodiscard]] ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

inline void require(bool condition, ErrorCode code, const std::string& what) {
  if (!condition) fail(code, what);
}

}  // namespace fbsde
