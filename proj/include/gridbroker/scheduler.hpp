#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "gridbroker/fabric.hpp"
#include "gridbroker/model.hpp"
#include "gridbroker/trading.hpp"

namespace gridbroker {

struct SchedulerConfig {
    double smoothing_alpha = 0.3;
    double default_job_seconds = 300.0;  // optimistic estimate before a resource is measured
    std::uint32_t calibration_jobs_per_resource = 1;
    SimTime quantum = seconds(60);
};

// ---------------------------------------------------------------------------
// Load profiling
// ---------------------------------------------------------------------------

struct RateEntry {
    double measured_job_seconds = 0;  // smoothed wall seconds per job per node
    std::uint32_t samples = 0;
    SimTime last_updated{0};

    friend bool operator==(const RateEntry&, const RateEntry&) = default;
};

struct RateProfile {
    std::map<ResourceId, RateEntry> entries;

    const RateEntry* find(const ResourceId& id) const;
    friend bool operator==(const RateProfile&, const RateProfile&) = default;
};

/// Exponential smoothing of the observed wall time; unsuccessful attempts
/// leave the profile untouched.
RateProfile update_rate(RateProfile profile, const AttemptRecord& report, double alpha = 0.3);

/// Jobs the resource can still finish before `deadline`; an unmeasured
/// resource is limited to its calibration allotment of one.
std::int64_t capacity_by_deadline(std::uint32_t available_nodes, const RateEntry* rate, SimTime now, SimTime deadline);

// ---------------------------------------------------------------------------
// Planning
// ---------------------------------------------------------------------------

struct QuotedResource {
    ResourceId id;
    PriceQuote quote;
    std::uint32_t available_nodes = 0;
    /// Expected release instants of jobs already executing there.
    std::vector<SimTime> executing_until;
};

struct ResourcePlan {
    ResourceId resource;
    std::vector<JobId> queue;

    friend bool operator==(const ResourcePlan&, const ResourcePlan&) = default;
};

struct Allocation {
    std::vector<ResourcePlan> plans;  // only resources with at least one job
    SimTime estimated_completion{0};
    GridDollars estimated_cost = 0;

    std::size_t total_jobs() const;
    std::size_t count(const ResourceId& id) const;
    std::optional<ResourceId> resource_of(JobId job) const;
    std::map<ResourceId, std::size_t> counts() const;

    friend bool operator==(const Allocation&, const Allocation&) = default;
};

enum class InfeasibilityKind { DeadlineInfeasible, BudgetInfeasible };

std::string_view to_string(InfeasibilityKind k);

struct Infeasibility {
    InfeasibilityKind kind;
    std::string detail;
};

using ScheduleResult = std::variant<Allocation, Infeasibility>;

/// Immutable snapshot the strategies plan against.
struct PlanningInput {
    std::vector<JobId> jobs;  // unfinished, not executing, in placement order
    std::vector<QuotedResource> resources;
    RateProfile profiles;
    QoSConstraints qos;
    GridDollars spent = 0;
    GridDollars committed = 0;
    SimTime now{0};
    SchedulerConfig config;
};

/// Estimated wall seconds per job on a resource (measured or the default).
double estimated_job_seconds(const RateProfile& profiles, const ResourceId& id, const SchedulerConfig& config);

/// Whole CPU-seconds used for costing, rounded up.
std::int64_t estimated_cpu_seconds(double job_seconds);

/// All available resources with fresh quotes. Throws NoResources.
std::vector<QuotedResource> discover_resources(const Fabric& fabric, std::string_view consumer,
                                               SimTime ttl = kDefaultQuoteTtl);

/// One calibration allotment per resource, cheapest first. Throws NoResources.
Allocation calibrate(const std::vector<QuotedResource>& resources, const std::vector<JobId>& jobs,
                     const SchedulerConfig& config = {});

/// Cheapest-first fill up to each resource's deadline capacity.
ScheduleResult schedule_cost_opt(const PlanningInput& in);

/// Minimum predicted makespan within the remaining budget.
ScheduleResult schedule_time_opt(const PlanningInput& in);

ScheduleResult schedule(const PlanningInput& in);

struct JobMove {
    JobId job;
    std::optional<ResourceId> from;
    std::optional<ResourceId> to;

    friend bool operator==(const JobMove&, const JobMove&) = default;
};

struct Rebalance {
    Allocation allocation;
    std::vector<JobMove> delta;
};

/// Re-run the active strategy and keep each job on its previous resource
/// whenever the new per-resource targets allow it. Only moved jobs are
/// reported in `delta`.
std::variant<Rebalance, Infeasibility> rebalance(const Allocation& previous, const PlanningInput& in);

}  // namespace gridbroker
