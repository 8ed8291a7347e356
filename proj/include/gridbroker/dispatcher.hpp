#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <vector>

#include "gridbroker/fabric.hpp"
#include "gridbroker/model.hpp"
#include "gridbroker/scheduler.hpp"
#include "gridbroker/trading.hpp"

namespace gridbroker {

struct DispatchAction {
    JobId job;
    ResourceId resource;
    std::uint32_t node = 0;
    Contract contract;
    GridDollars authorized_cost = 0;
};

struct DispatchInput {
    const Allocation* allocation = nullptr;
    const Fabric* fabric = nullptr;
    Accounts accounts;
    QoSConstraints qos;
    std::map<ResourceId, PriceQuote> quotes;
    /// CPU-seconds to authorize for a job on a resource.
    std::function<std::int64_t(JobId, const ResourceId&)> authorized_cpu_seconds;
    GridDollars max_price = 0;  // 0 means no cap
    SimTime now{0};
};

struct DispatchResult {
    std::vector<DispatchAction> actions;
    std::size_t withheld = 0;  // queued jobs held back by budget or trading
    bool reschedule_requested = false;
};

/// One action per free node, in allocation queue order, while the running
/// total of spent + committed stays within budget.
DispatchResult dispatch_quantum(const DispatchInput& in);

/// What an agent will report if nothing interrupts it.
struct AgentRun {
    JobId job;
    ResourceId resource;
    std::uint32_t node = 0;
    SimTime started{0};
    SimTime finishes{0};
    double service_seconds = 0;
    std::int64_t cpu_seconds = 0;  // full-run consumption
    AttemptOutcome outcome = AttemptOutcome::Success;
};

struct AgentReport {
    JobId job;
    std::int64_t cpu_seconds = 0;
    double wall_seconds = 0;
    AttemptOutcome exit = AttemptOutcome::Success;
    SimTime end{0};
    std::string stdout_handle;
    std::string stderr_handle;

    AttemptReport attempt_report() const { return AttemptReport{end, cpu_seconds, wall_seconds, exit}; }
};

/// Stage in, then execute for the job's service time on the node.
AgentRun agent_execute(const DispatchAction& action, const Fabric& fabric, double nominal_cpu_seconds,
                       std::size_t attempt_index, SimTime now);

AgentReport completion_report(const AgentRun& run);

/// Report for an agent whose resource failed at `at`: CPU time is charged
/// in proportion to the execution progress made after stage-in.
AgentReport interrupted_report(const AgentRun& run, SimTime stage_delay, SimTime at,
                               AttemptOutcome outcome = AttemptOutcome::ResourceFailure);

enum class ErrorClass { Complete, FailAndRequeue, FailTerminal };

/// Map an agent outcome to the job's next lifecycle step. `task_errors`
/// counts TaskError attempts including this one; ResourceFailure and
/// Preempted never count against the limit.
ErrorClass detect_error(AttemptOutcome outcome, std::size_t task_errors, std::uint32_t retry_limit = 3);

}  // namespace gridbroker
