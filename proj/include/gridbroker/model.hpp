#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "gridbroker/plan.hpp"
#include "gridbroker/types.hpp"

namespace gridbroker {

enum class Strategy { TimeOpt, CostOpt };

std::string_view to_string(Strategy s);
Strategy strategy_from_string(std::string_view s);

struct QoSConstraints {
    SimTime deadline = minutes(120);
    GridDollars budget = 0;
    Strategy strategy = Strategy::CostOpt;
    bool enforce_deadline = true;
    bool enforce_budget = true;

    /// Throws InvalidArgument unless budget >= 0 and deadline > 0.
    void validate() const;

    friend bool operator==(const QoSConstraints&, const QoSConstraints&) = default;
};

enum class JobState { Ready, Scheduled, Staged, Executing, Done, Failed, Cancelled };

std::string_view to_string(JobState s);
JobState job_state_from_string(std::string_view s);

inline bool is_terminal(JobState s) { return s == JobState::Done || s == JobState::Cancelled; }

enum class AttemptOutcome { Success, ResourceFailure, TaskError, Preempted };

std::string_view to_string(AttemptOutcome o);
AttemptOutcome attempt_outcome_from_string(std::string_view s);

struct AttemptRecord {
    ResourceId resource;
    std::uint32_t node = 0;
    SimTime start{0};
    std::optional<SimTime> end;
    std::int64_t cpu_seconds = 0;
    double wall_seconds = 0.0;
    std::optional<AttemptOutcome> outcome;  // empty while the attempt is open

    bool open() const { return !outcome.has_value(); }
};

/// What an agent reports when an attempt ends.
struct AttemptReport {
    SimTime end{0};
    std::int64_t cpu_seconds = 0;
    double wall_seconds = 0.0;
    AttemptOutcome outcome = AttemptOutcome::Success;
};

using Binding = std::vector<std::pair<std::string, std::string>>;

struct Job {
    JobId id;
    Binding binding;
    std::string command;
    std::optional<double> nominal_cpu_seconds;
    JobState state = JobState::Ready;
    std::optional<ResourceId> assigned_resource;
    std::vector<AttemptRecord> attempts;

    std::size_t task_errors() const;
    const AttemptRecord* open_attempt() const;
};

namespace event {
struct Assign { ResourceId resource; };
struct Stage {};
struct Start { std::uint32_t node = 0; SimTime at{0}; };
struct Complete { AttemptReport report; };
struct Fail { AttemptReport report; };
struct Requeue {};
/// Closes an open attempt as Preempted with the given report, if one is open.
struct Cancel { std::optional<AttemptReport> report; };
}  // namespace event

using JobEvent = std::variant<event::Assign, event::Stage, event::Start, event::Complete, event::Fail,
                              event::Requeue, event::Cancel>;

std::string_view event_name(const JobEvent& e);

/// Apply one lifecycle event. Throws IllegalTransition (leaving `job`
/// untouched) for any pairing outside the transition table.
Job transition_job(Job job, const JobEvent& event);

struct ResourceLedger {
    std::int64_t jobs_done = 0;
    std::int64_t cpu_seconds = 0;
    GridDollars cost = 0;

    friend bool operator==(const ResourceLedger&, const ResourceLedger&) = default;
};

struct Accounts {
    GridDollars spent = 0;
    GridDollars committed = 0;
    std::map<ResourceId, ResourceLedger> per_resource;

    friend bool operator==(const Accounts&, const Accounts&) = default;
};

enum class Phase { Created, Calibrating, Running, Paused, Completed, FailedDeadline, FailedBudget, Stopped };

std::string_view to_string(Phase p);
Phase phase_from_string(std::string_view s);

inline bool is_terminal(Phase p) {
    return p == Phase::Completed || p == Phase::FailedDeadline || p == Phase::FailedBudget || p == Phase::Stopped;
}

struct Experiment {
    std::string id;
    PlanModel plan;
    std::vector<Job> jobs;  // jobs[i].id.value == i + 1
    QoSConstraints qos;
    Accounts accounts;
    Phase phase = Phase::Created;
    SimTime clock_origin{0};
    bool reschedule_requested = false;

    Job& job(JobId id);
    const Job& job(JobId id) const;
    bool has_job(JobId id) const { return id.value >= 1 && id.value <= jobs.size(); }

    /// True when every job is Done or Cancelled and at least one is Done.
    bool all_jobs_finished() const;
    std::size_t count(JobState s) const;
};

/// Replace the QoS constraints of a non-terminal experiment and request a
/// replan. Throws ExperimentTerminal or InvalidArgument.
Experiment qos_update(Experiment experiment, const QoSConstraints& next);

}  // namespace gridbroker
