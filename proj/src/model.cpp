#include "gridbroker/model.hpp"

#include <algorithm>
#include <array>

namespace gridbroker {

namespace {

template <class... Ts>
struct overloaded : Ts... {
    using Ts::operator()...;
};

template <class Enum, std::size_t N>
Enum parse_enum(std::string_view s, const std::array<std::pair<Enum, std::string_view>, N>& table, const char* what) {
    for (const auto& [value, name] : table) {
        if (name == s) return value;
    }
    throw Error(ErrorCode::InvalidArgument, std::string("unknown ") + what + " '" + std::string(s) + "'");
}

constexpr std::array<std::pair<JobState, std::string_view>, 7> kJobStates{{
    {JobState::Ready, "Ready"},
    {JobState::Scheduled, "Scheduled"},
    {JobState::Staged, "Staged"},
    {JobState::Executing, "Executing"},
    {JobState::Done, "Done"},
    {JobState::Failed, "Failed"},
    {JobState::Cancelled, "Cancelled"},
}};

constexpr std::array<std::pair<AttemptOutcome, std::string_view>, 4> kOutcomes{{
    {AttemptOutcome::Success, "Success"},
    {AttemptOutcome::ResourceFailure, "ResourceFailure"},
    {AttemptOutcome::TaskError, "TaskError"},
    {AttemptOutcome::Preempted, "Preempted"},
}};

constexpr std::array<std::pair<Phase, std::string_view>, 8> kPhases{{
    {Phase::Created, "Created"},
    {Phase::Calibrating, "Calibrating"},
    {Phase::Running, "Running"},
    {Phase::Paused, "Paused"},
    {Phase::Completed, "Completed"},
    {Phase::FailedDeadline, "FailedDeadline"},
    {Phase::FailedBudget, "FailedBudget"},
    {Phase::Stopped, "Stopped"},
}};

template <class Enum, std::size_t N>
std::string_view lookup(Enum v, const std::array<std::pair<Enum, std::string_view>, N>& table) {
    for (const auto& [value, name] : table) {
        if (value == v) return name;
    }
    return "?";
}

[[noreturn]] void illegal(const Job& job, const JobEvent& e) {
    throw Error(ErrorCode::IllegalTransition, "job " + std::to_string(job.id.value) + ": " +
                                                  std::string(event_name(e)) + " in state " +
                                                  std::string(to_string(job.state)));
}

void close_attempt(Job& job, const AttemptReport& report) {
    auto& attempt = job.attempts.back();
    attempt.end = report.end;
    attempt.cpu_seconds = report.cpu_seconds;
    attempt.wall_seconds = report.wall_seconds;
    attempt.outcome = report.outcome;
}

}  // namespace

std::string_view to_string(Strategy s) { return s == Strategy::TimeOpt ? "time" : "cost"; }

Strategy strategy_from_string(std::string_view s) {
    if (s == "time" || s == "TimeOpt") return Strategy::TimeOpt;
    if (s == "cost" || s == "CostOpt") return Strategy::CostOpt;
    throw Error(ErrorCode::InvalidArgument, "unknown strategy '" + std::string(s) + "'");
}

void QoSConstraints::validate() const {
    if (budget < 0) throw Error(ErrorCode::InvalidArgument, "budget must be non-negative");
    if (deadline <= SimTime{0}) throw Error(ErrorCode::InvalidArgument, "deadline must be positive");
}

std::string_view to_string(JobState s) { return lookup(s, kJobStates); }
JobState job_state_from_string(std::string_view s) { return parse_enum(s, kJobStates, "job state"); }
std::string_view to_string(AttemptOutcome o) { return lookup(o, kOutcomes); }
AttemptOutcome attempt_outcome_from_string(std::string_view s) { return parse_enum(s, kOutcomes, "outcome"); }
std::string_view to_string(Phase p) { return lookup(p, kPhases); }
Phase phase_from_string(std::string_view s) { return parse_enum(s, kPhases, "phase"); }

std::size_t Job::task_errors() const {
    return static_cast<std::size_t>(std::count_if(attempts.begin(), attempts.end(), [](const AttemptRecord& a) {
        return a.outcome == AttemptOutcome::TaskError;
    }));
}

const AttemptRecord* Job::open_attempt() const {
    if (attempts.empty() || !attempts.back().open()) return nullptr;
    return &attempts.back();
}

std::string_view event_name(const JobEvent& e) {
    return std::visit(overloaded{
                          [](const event::Assign&) { return std::string_view("Assign"); },
                          [](const event::Stage&) { return std::string_view("Stage"); },
                          [](const event::Start&) { return std::string_view("Start"); },
                          [](const event::Complete&) { return std::string_view("Complete"); },
                          [](const event::Fail&) { return std::string_view("Fail"); },
                          [](const event::Requeue&) { return std::string_view("Requeue"); },
                          [](const event::Cancel&) { return std::string_view("Cancel"); },
                      },
                      e);
}

Job transition_job(Job job, const JobEvent& e) {
    std::visit(overloaded{
                   [&](const event::Assign& a) {
                       if (job.state != JobState::Ready) illegal(job, e);
                       job.state = JobState::Scheduled;
                       job.assigned_resource = a.resource;
                   },
                   [&](const event::Stage&) {
                       if (job.state != JobState::Scheduled) illegal(job, e);
                       job.state = JobState::Staged;
                   },
                   [&](const event::Start& s) {
                       if (job.state != JobState::Staged) illegal(job, e);
                       job.state = JobState::Executing;
                       job.attempts.push_back(AttemptRecord{*job.assigned_resource, s.node, s.at, {}, 0, 0.0, {}});
                   },
                   [&](const event::Complete& c) {
                       if (job.state != JobState::Executing || c.report.outcome != AttemptOutcome::Success) {
                           illegal(job, e);
                       }
                       close_attempt(job, c.report);
                       job.state = JobState::Done;
                       job.assigned_resource.reset();
                   },
                   [&](const event::Fail& f) {
                       if (job.state != JobState::Executing || f.report.outcome == AttemptOutcome::Success) {
                           illegal(job, e);
                       }
                       close_attempt(job, f.report);
                       job.state = JobState::Failed;
                       job.assigned_resource.reset();
                   },
                   [&](const event::Requeue&) {
                       if (job.state != JobState::Failed) illegal(job, e);
                       job.state = JobState::Ready;
                   },
                   [&](const event::Cancel& c) {
                       if (is_terminal(job.state)) illegal(job, e);
                       if (job.open_attempt() != nullptr) {
                           AttemptReport report = c.report.value_or(AttemptReport{job.attempts.back().start, 0, 0.0,
                                                                                  AttemptOutcome::Preempted});
                           report.outcome = AttemptOutcome::Preempted;
                           close_attempt(job, report);
                       }
                       job.state = JobState::Cancelled;
                       job.assigned_resource.reset();
                   },
               },
               e);
    return job;
}

Job& Experiment::job(JobId id) {
    if (!has_job(id)) throw Error(ErrorCode::UnknownJob, "job " + std::to_string(id.value));
    return jobs[id.value - 1];
}

const Job& Experiment::job(JobId id) const {
    if (!has_job(id)) throw Error(ErrorCode::UnknownJob, "job " + std::to_string(id.value));
    return jobs[id.value - 1];
}

bool Experiment::all_jobs_finished() const {
    bool any_done = false;
    for (const auto& j : jobs) {
        if (!is_terminal(j.state)) return false;
        any_done = any_done || j.state == JobState::Done;
    }
    return any_done;
}

std::size_t Experiment::count(JobState s) const {
    return static_cast<std::size_t>(
        std::count_if(jobs.begin(), jobs.end(), [s](const Job& j) { return j.state == s; }));
}

Experiment qos_update(Experiment experiment, const QoSConstraints& next) {
    if (is_terminal(experiment.phase)) {
        throw Error(ErrorCode::ExperimentTerminal,
                    "experiment " + experiment.id + " is " + std::string(to_string(experiment.phase)));
    }
    next.validate();
    experiment.qos = next;
    experiment.reschedule_requested = true;
    return experiment;
}

}  // namespace gridbroker
