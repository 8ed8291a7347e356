#include "gridbroker/types.hpp"

#include <cmath>

namespace gridbroker {

std::int64_t round_half_up(double v) { return static_cast<std::int64_t>(std::floor(v + 0.5)); }

SimTime from_seconds(double s) { return SimTime{round_half_up(s * 1000.0)}; }

std::string_view to_string(ErrorCode code) {
    switch (code) {
        case ErrorCode::IllegalTransition: return "IllegalTransition";
        case ErrorCode::ExperimentTerminal: return "ExperimentTerminal";
        case ErrorCode::SyntaxError: return "SyntaxError";
        case ErrorCode::UndeclaredParameter: return "UndeclaredParameter";
        case ErrorCode::DuplicateParameter: return "DuplicateParameter";
        case ErrorCode::EmptyDomain: return "EmptyDomain";
        case ErrorCode::MissingBinding: return "MissingBinding";
        case ErrorCode::ResourceUnavailable: return "ResourceUnavailable";
        case ErrorCode::NoResources: return "NoResources";
        case ErrorCode::StorageFailure: return "StorageFailure";
        case ErrorCode::CorruptJournal: return "CorruptJournal";
        case ErrorCode::JobExecuting: return "JobExecuting";
        case ErrorCode::UnknownJob: return "UnknownJob";
        case ErrorCode::UnknownAttempt: return "UnknownAttempt";
        case ErrorCode::LengthMismatch: return "LengthMismatch";
        case ErrorCode::EmptyQueue: return "EmptyQueue";
        case ErrorCode::ConfigError: return "ConfigError";
        case ErrorCode::PastInstant: return "PastInstant";
        case ErrorCode::NoData: return "NoData";
        case ErrorCode::InvalidArgument: return "InvalidArgument";
    }
    return "Unknown";
}

}  // namespace gridbroker
