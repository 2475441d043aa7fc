#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace pedrisk {

/// Every failure the library reports carries one of these codes so callers
/// (HTTP status mapping, CLI exit codes, tests) can branch without parsing text.
enum class ErrorCode {
    // fhir-ingest
    MalformedDocument,
    MissingPatient,
    MultiplePatients,
    SchemaViolation,
    Transport,
    NotFound,
    Unauthorized,
    PaginationLoop,
    NegativeAge,
    MissingDate,
    // vocab-registry
    ParseError,
    DuplicateCode,
    NonMonotoneEdges,
    InsufficientData,
    NotFitted,
    // growth-reference
    NonPositiveInput,
    OutOfRange,
    UnknownSex,
    // feature-sequencer
    InvalidSegments,
    OutOfSchedule,
    // risk-model
    InvalidConfig,
    ShapeMismatch,
    UnknownId,
    AllMasked,
    NonFiniteGradient,
    VersionMismatch,
    FingerprintMismatch,
    Corrupt,
    // train-eval
    TooSmall,
    SingleClass,
    DegenerateResampling,
    TooFewCalibrationPoints,
    // synth-cohort
    UnknownPlantedFeature,
    // cds-service
    Ineligible,
    Io,
};

std::string_view to_string(ErrorCode code) noexcept;

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

    [[nodiscard]] ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

}  // namespace pedrisk
