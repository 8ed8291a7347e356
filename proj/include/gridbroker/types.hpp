#pragma once

#include <chrono>
#include <compare>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace gridbroker {

/// Virtual time since the experiment clock origin. One tick is a millisecond;
/// all user-facing quantities are expressed in seconds or minutes.
using SimTime = std::chrono::milliseconds;

/// Grid dollars. All accounting is integer-exact.
using GridDollars = std::int64_t;

using ResourceId = std::string;

struct JobId {
    std::uint32_t value = 0;

    friend constexpr auto operator<=>(JobId, JobId) = default;
};

inline constexpr SimTime seconds(std::int64_t s) { return SimTime{s * 1000}; }
inline constexpr SimTime minutes(std::int64_t m) { return SimTime{m * 60'000}; }

inline double to_seconds(SimTime t) { return static_cast<double>(t.count()) / 1000.0; }
inline double to_minutes(SimTime t) { return static_cast<double>(t.count()) / 60'000.0; }

/// Round a non-negative value half-up to the nearest integer.
std::int64_t round_half_up(double v);

SimTime from_seconds(double s);

enum class ErrorCode {
    IllegalTransition,
    ExperimentTerminal,
    SyntaxError,
    UndeclaredParameter,
    DuplicateParameter,
    EmptyDomain,
    MissingBinding,
    ResourceUnavailable,
    NoResources,
    StorageFailure,
    CorruptJournal,
    JobExecuting,
    UnknownJob,
    UnknownAttempt,
    LengthMismatch,
    EmptyQueue,
    ConfigError,
    PastInstant,
    NoData,
    InvalidArgument,
};

std::string_view to_string(ErrorCode code);

/// Faults raised by broker operations. Value-level outcomes (quote
/// rejections, scheduling infeasibility) are returned, not thrown.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

}  // namespace gridbroker

template <>
struct std::hash<gridbroker::JobId> {
    std::size_t operator()(gridbroker::JobId id) const noexcept { return std::hash<std::uint32_t>{}(id.value); }
};
