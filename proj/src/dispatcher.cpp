#include "gridbroker/dispatcher.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace gridbroker {

DispatchResult dispatch_quantum(const DispatchInput& in) {
    DispatchResult out;
    GridDollars reserved = in.accounts.spent + in.accounts.committed;
    const GridDollars cap = in.qos.enforce_budget ? in.qos.budget : std::numeric_limits<GridDollars>::max();

    for (const auto& plan : in.allocation->plans) {
        if (plan.queue.empty()) continue;
        if (!in.fabric->has_resource(plan.resource) || !in.fabric->available(plan.resource)) {
            out.withheld += plan.queue.size();
            out.reschedule_requested = true;
            continue;
        }
        const auto q = in.quotes.find(plan.resource);
        if (q == in.quotes.end()) {
            out.withheld += plan.queue.size();
            out.reschedule_requested = true;
            continue;
        }
        const GridDollars max_price = in.max_price > 0 ? in.max_price : std::numeric_limits<GridDollars>::max();
        auto deal = negotiate(ContractRequest{plan.resource, max_price}, q->second, in.now);
        if (std::holds_alternative<Rejection>(deal)) {
            out.withheld += plan.queue.size();
            out.reschedule_requested = true;
            continue;
        }
        const auto& contract = std::get<Contract>(deal);
        const auto free = in.fabric->free_nodes(plan.resource);
        std::size_t used = 0;
        for (auto job : plan.queue) {
            if (used >= free.size()) break;
            const GridDollars authorized =
                std::max<GridDollars>(1, in.authorized_cpu_seconds(job, plan.resource) * contract.price);
            if (reserved + authorized > cap) {
                out.withheld += plan.queue.size() - used;
                out.reschedule_requested = true;
                break;
            }
            reserved += authorized;
            out.actions.push_back(DispatchAction{job, plan.resource, free[used], contract, authorized});
            ++used;
        }
    }
    return out;
}

AgentRun agent_execute(const DispatchAction& action, const Fabric& fabric, double nominal_cpu_seconds,
                       std::size_t attempt_index, SimTime now) {
    const auto& resource = fabric.resource(action.resource);
    AgentRun run;
    run.job = action.job;
    run.resource = action.resource;
    run.node = action.node;
    run.started = now;
    run.service_seconds = service_time(nominal_cpu_seconds, resource, action.job, fabric.config().load);
    run.finishes = now + fabric.config().stage_delay + from_seconds(run.service_seconds);
    const auto wall_floor = static_cast<std::int64_t>(std::floor(to_seconds(run.finishes - now)));
    run.cpu_seconds = std::max<std::int64_t>(
        1, std::min(round_half_up(nominal_cpu_seconds / resource.speed_factor), wall_floor));
    run.outcome = fabric.task_error(action.job, attempt_index) ? AttemptOutcome::TaskError : AttemptOutcome::Success;
    return run;
}

AgentReport completion_report(const AgentRun& run) {
    AgentReport r;
    r.job = run.job;
    r.cpu_seconds = run.cpu_seconds;
    r.wall_seconds = to_seconds(run.finishes - run.started);
    r.exit = run.outcome;
    r.end = run.finishes;
    r.stdout_handle = "sim://" + run.resource + "/" + std::to_string(run.job.value) + "/stdout";
    r.stderr_handle = "sim://" + run.resource + "/" + std::to_string(run.job.value) + "/stderr";
    return r;
}

AgentReport interrupted_report(const AgentRun& run, SimTime stage_delay, SimTime at, AttemptOutcome outcome) {
    AgentReport r = completion_report(run);
    r.exit = outcome;
    r.end = at;
    r.wall_seconds = to_seconds(at - run.started);
    const auto exec_start = run.started + stage_delay;
    const auto exec_total = run.finishes - exec_start;
    if (at <= exec_start || exec_total <= SimTime{0}) {
        r.cpu_seconds = 0;
    } else {
        const double progress = std::min(1.0, to_seconds(at - exec_start) / to_seconds(exec_total));
        r.cpu_seconds = round_half_up(static_cast<double>(run.cpu_seconds) * progress);
    }
    r.cpu_seconds = std::min<std::int64_t>(r.cpu_seconds, static_cast<std::int64_t>(std::floor(r.wall_seconds)));
    return r;
}

ErrorClass detect_error(AttemptOutcome outcome, std::size_t task_errors, std::uint32_t retry_limit) {
    switch (outcome) {
        case AttemptOutcome::Success:
            return ErrorClass::Complete;
        case AttemptOutcome::TaskError:
            return task_errors > retry_limit ? ErrorClass::FailTerminal : ErrorClass::FailAndRequeue;
        case AttemptOutcome::ResourceFailure:
        case AttemptOutcome::Preempted:
            return ErrorClass::FailAndRequeue;
    }
    return ErrorClass::FailTerminal;
}

}  // namespace gridbroker
