#pragma once

#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "gridbroker/dispatcher.hpp"
#include "gridbroker/engine.hpp"
#include "gridbroker/fabric.hpp"
#include "gridbroker/scheduler.hpp"

namespace gridbroker {

struct RunSummary {
    std::string experiment_id;
    Phase phase = Phase::Created;
    double makespan_min = 0;
    GridDollars total_cost = 0;
    std::map<ResourceId, std::int64_t> per_resource_jobs;
    std::size_t jobs_done = 0;
    std::size_t jobs_total = 0;

    nlohmann::json to_json() const;
};

/// Drives one experiment through the simulated grid: the farming engine
/// owns state and the journal, the scheduler plans each quantum, the
/// dispatcher deploys agents and the fabric's event loop delivers their
/// reports.
class Broker {
public:
    Broker(RunConfig config, JournalSink& sink);

    /// Resume from a journal after a crash. Records describing the demotion
    /// of interrupted jobs are appended to `sink`.
    static std::unique_ptr<Broker> recover(JournalSink& sink, std::span<const JournalRecord> records);

    Broker(const Broker&) = delete;
    Broker& operator=(const Broker&) = delete;

    // Commands; each applies at the current virtual instant.
    void start();
    void pause();
    void resume();
    void stop();
    void change_qos(const QoSConstraints& qos);
    std::vector<JobId> add_jobs(const std::vector<JobSpec>& specs);
    void remove_jobs(const std::vector<JobId>& ids);
    void inject_failure(const ResourceId& resource, SimTime at, SimTime duration);

    /// Deliver a command as a ClientCommand event stamped `at`.
    void schedule_command(SimTime at, std::function<void(Broker&)> command);

    /// Run one event. Returns false once the experiment has finished.
    bool step();
    void run();
    /// Run every event up to and including `t`, then move the clock to `t`.
    void run_until(SimTime t);
    bool finished() const;

    const FarmingEngine& engine() const { return engine_; }
    const Experiment& experiment() const { return engine_.experiment(); }
    const Fabric& fabric() const { return fabric_; }
    const Allocation& allocation() const { return allocation_; }
    SimTime now() const { return fabric_.now(); }
    RunSummary summary() const;

    void subscribe(std::function<void(const JournalRecord&)> observer) { engine_.subscribe(std::move(observer)); }
    /// Observe every executed simulation event (instant, ordinal, kind).
    void trace(std::function<void(const SimEvent&)> observer) { tracer_ = std::move(observer); }

private:
    struct RunningAgent {
        AgentRun run;
        GridDollars price = 0;
        std::uint64_t token = 0;
    };

    Broker(FarmingEngine engine, RunConfig config);

    void wire_fabric();
    void schedule_tick(SimTime at);
    void on_quantum();
    void calibrate_step(const std::vector<QuotedResource>& quoted);
    void replan(const std::vector<QuotedResource>& quoted);
    void dispatch(const Allocation& allocation, const std::vector<QuotedResource>& quoted);
    void on_agent_done(JobId job, std::uint64_t token);
    void on_resource_down(const ResourceId& id);
    void handle_report(JobId job, const AgentReport& report, GridDollars price);
    void check_completion();
    void enter_terminal(Phase phase, std::string_view reason);
    PlanningInput planning_input(const std::vector<QuotedResource>& quoted) const;
    std::vector<QuotedResource> quoted_resources() const;
    std::vector<JobId> pending_jobs() const;
    std::int64_t authorized_cpu(JobId job, const ResourceId& resource) const;
    SimTime next_boundary(SimTime t) const;

    RunConfig config_;
    Fabric fabric_;
    FarmingEngine engine_;
    Allocation allocation_;
    std::map<JobId, RunningAgent> running_;
    std::uint64_t next_token_ = 1;
    bool tick_scheduled_ = false;
    bool reschedule_pending_ = false;
    std::string replan_reason_;
    std::function<void(const SimEvent&)> tracer_;
};

}  // namespace gridbroker
