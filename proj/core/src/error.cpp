#include "pedrisk/error.hpp"

namespace pedrisk {

std::string_view to_string(ErrorCode code) noexcept {
    switch (code) {
        case ErrorCode::MalformedDocument: return "MalformedDocument";
        case ErrorCode::MissingPatient: return "MissingPatient";
        case ErrorCode::MultiplePatients: return "MultiplePatients";
        case ErrorCode::SchemaViolation: return "SchemaViolation";
        case ErrorCode::Transport: return "Transport";
        case ErrorCode::NotFound: return "NotFound";
        case ErrorCode::Unauthorized: return "Unauthorized";
        case ErrorCode::PaginationLoop: return "PaginationLoop";
        case ErrorCode::NegativeAge: return "NegativeAge";
        case ErrorCode::MissingDate: return "MissingDate";
        case ErrorCode::ParseError: return "ParseError";
        case ErrorCode::DuplicateCode: return "DuplicateCode";
        case ErrorCode::NonMonotoneEdges: return "NonMonotoneEdges";
        case ErrorCode::InsufficientData: return "InsufficientData";
        case ErrorCode::NotFitted: return "NotFitted";
        case ErrorCode::NonPositiveInput: return "NonPositiveInput";
        case ErrorCode::OutOfRange: return "OutOfRange";
        case ErrorCode::UnknownSex: return "UnknownSex";
        case ErrorCode::InvalidSegments: return "InvalidSegments";
        case ErrorCode::OutOfSchedule: return "OutOfSchedule";
        case ErrorCode::InvalidConfig: return "InvalidConfig";
        case ErrorCode::ShapeMismatch: return "ShapeMismatch";
        case ErrorCode::UnknownId: return "UnknownId";
        case ErrorCode::AllMasked: return "AllMasked";
        case ErrorCode::NonFiniteGradient: return "NonFiniteGradient";
        case ErrorCode::VersionMismatch: return "VersionMismatch";
        case ErrorCode::FingerprintMismatch: return "FingerprintMismatch";
        case ErrorCode::Corrupt: return "Corrupt";
        case ErrorCode::TooSmall: return "TooSmall";
        case ErrorCode::SingleClass: return "SingleClass";
        case ErrorCode::DegenerateResampling: return "DegenerateResampling";
        case ErrorCode::TooFewCalibrationPoints: return "TooFewCalibrationPoints";
        case ErrorCode::UnknownPlantedFeature: return "UnknownPlantedFeature";
        case ErrorCode::Ineligible: return "Ineligible";
        case ErrorCode::Io: return "Io";
    }
    return "Unknown";
}

}  // namespace pedrisk
