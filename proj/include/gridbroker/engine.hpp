#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"

#include "gridbroker/fabric.hpp"
#include "gridbroker/journal.hpp"
#include "gridbroker/model.hpp"
#include "gridbroker/plan.hpp"
#include "gridbroker/scheduler.hpp"

namespace gridbroker {

/// Everything needed to re-create an experiment; stored in its first
/// journal record.
struct RunConfig {
    std::string experiment_id = "exp-1";
    std::string consumer = "default";
    std::string plan_text;
    std::vector<Resource> testbed;
    QoSConstraints qos;
    FabricConfig fabric;
    SchedulerConfig scheduler;
    double nominal_job_seconds = 300.0;
    double job_jitter = 0.0;  // relative spread of per-job nominal seconds
    std::uint32_t retry_limit = 3;
    std::int64_t lost_work_cpu_seconds = 0;  // charged for attempts lost in a crash
    std::optional<GridDollars> max_price;

    nlohmann::json to_json() const;
    static RunConfig from_json(const nlohmann::json& j);
};

nlohmann::json qos_to_json(const QoSConstraints& q);
QoSConstraints qos_from_json(const nlohmann::json& j, const QoSConstraints& base = {});

/// An open dispatch: committed budget held until the attempt closes.
struct Authorization {
    ResourceId resource;
    std::uint32_t node = 0;
    GridDollars price = 0;
    GridDollars authorized_cost = 0;
};

struct InjectedFailure {
    ResourceId resource;
    SimTime at{0};
    SimTime duration{0};
};

/// Engine state: a pure fold over the journal.
struct EngineState {
    RunConfig config;
    Experiment experiment;
    RateProfile profiles;
    std::map<JobId, Authorization> authorizations;
    std::vector<InjectedFailure> injected_failures;
    std::uint64_t last_seq = 0;
    SimTime last_t{0};
    std::uint64_t quantum_marks = 0;
    std::uint32_t infeasible_streak = 0;
    std::optional<InfeasibilityKind> last_infeasibility;
    std::optional<SimTime> last_completion;
    std::optional<Phase> paused_from;
    bool created = false;
};

void apply(EngineState& state, const JournalRecord& record);

/// Fold records from seq 1, checking contiguity. Throws CorruptJournal.
EngineState replay(std::span<const JournalRecord> records);

/// Fold and call `visit` after each record is applied.
void replay_each(std::span<const JournalRecord> records,
                 const std::function<void(const EngineState&, const JournalRecord&)>& visit);

/// Σ counts_i × prices_i × cpu_seconds_per_job. Throws LengthMismatch.
GridDollars allocation_cost(std::span<const std::int64_t> counts, std::span<const GridDollars> prices,
                            std::int64_t cpu_seconds_per_job);

struct JobFilter {
    std::optional<JobState> state;
    std::optional<ResourceId> resource;
};

/// Persistent task-farming engine. Single writer: every mutation is a
/// journal record that is appended durably before it is applied.
class FarmingEngine {
public:
    explicit FarmingEngine(JournalSink& sink);

    /// Rebuild from a journal and demote jobs that were executing at the
    /// crash to Ready, closing their attempts as Preempted. The demotion
    /// records are appended to `sink`.
    static FarmingEngine recover(JournalSink& sink, std::span<const JournalRecord> records);

    std::uint64_t persist_event(RecordKind kind, SimTime t, nlohmann::json payload);

    const EngineState& state() const { return state_; }
    const Experiment& experiment() const { return state_.experiment; }
    const Accounts& accounts() const { return state_.experiment.accounts; }
    bool halted() const { return halted_; }

    void subscribe(std::function<void(const JournalRecord&)> observer);

    // Experiment control
    void create(const RunConfig& config, SimTime t);
    void set_phase(Phase next, SimTime t, std::string_view reason);
    void change_qos(const QoSConstraints& qos, SimTime t);

    // Application interface
    std::vector<JobId> add_jobs(const std::vector<JobSpec>& specs, SimTime t);
    void remove_jobs(const std::vector<JobId>& ids, SimTime t);
    std::vector<Job> query_jobs(const JobFilter& filter) const;

    // Scheduling interface
    void mark_quantum(SimTime t);
    void record_allocation(SimTime t, nlohmann::json payload);
    void note_failure(const InjectedFailure& failure, SimTime t);

    /// Assign, Stage and Start in one dispatch; commits `authorized_cost`.
    void dispatch(JobId job, const ResourceId& resource, std::uint32_t node, GridDollars price,
                  GridDollars authorized_cost, SimTime t);

    /// Close the open attempt of an executing job: charge cpu × price,
    /// release its authorization and move it to Done / Failed (or Cancelled
    /// when `cancel`). Throws UnknownAttempt.
    const Accounts& record_report(JobId job, const AttemptReport& report, GridDollars price, bool cancel = false);

    void requeue(JobId job, SimTime t);

private:
    void transition_record(JobId job, std::string_view event, SimTime t, nlohmann::json extra = nlohmann::json::object());

    JournalSink& sink_;
    EngineState state_;
    bool halted_ = false;
    std::vector<std::function<void(const JournalRecord&)>> observers_;
};

}  // namespace gridbroker
