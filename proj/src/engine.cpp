#include "gridbroker/engine.hpp"

#include <algorithm>

namespace gridbroker {

using nlohmann::json;

namespace {

double minutes_of(SimTime t) { return to_minutes(t); }
SimTime from_minutes(double m) { return from_seconds(m * 60.0); }

json binding_json(const Binding& b) {
    json out = json::array();
    for (const auto& [k, v] : b) out.push_back(json::array({k, v}));
    return out;
}

Binding binding_from(const json& j) {
    Binding b;
    for (const auto& kv : j) b.emplace_back(kv.at(0).get<std::string>(), kv.at(1).get<std::string>());
    return b;
}

double job_nominal(const RunConfig& c, JobId id) {
    if (c.job_jitter <= 0) return c.nominal_job_seconds;
    const double u = unit_interval(splitmix64(splitmix64(c.fabric.load.seed ^ 0x6a09e667ULL) ^ id.value));
    return c.nominal_job_seconds * (1.0 + c.job_jitter * (2.0 * u - 1.0));
}

Job make_job(const RunConfig& c, JobId id, Binding binding, std::string command, std::optional<double> nominal) {
    Job j;
    j.id = id;
    j.binding = std::move(binding);
    j.command = std::move(command);
    j.nominal_cpu_seconds = nominal ? nominal : std::optional<double>(job_nominal(c, id));
    return j;
}

JobId job_of(const json& payload) { return JobId{payload.at("job").get<std::uint32_t>()}; }

AttemptReport report_from(const json& p) {
    AttemptReport r;
    r.end = from_seconds(p.at("end").get<double>());
    r.cpu_seconds = p.at("cpu_seconds").get<std::int64_t>();
    r.wall_seconds = p.at("wall_seconds").get<double>();
    r.outcome = attempt_outcome_from_string(p.at("outcome").get<std::string>());
    return r;
}

void apply_transition(EngineState& s, const JournalRecord& rec) {
    auto& exp = s.experiment;
    const auto id = job_of(rec.payload);
    auto& job = exp.job(id);
    const auto ev = rec.payload.at("event").get<std::string>();
    if (ev == "Assign") {
        Authorization auth{rec.payload.at("resource").get<std::string>(), rec.payload.at("node").get<std::uint32_t>(),
                           rec.payload.at("price").get<GridDollars>(),
                           rec.payload.at("authorized_cost").get<GridDollars>()};
        job = transition_job(job, event::Assign{auth.resource});
        exp.accounts.committed += auth.authorized_cost;
        s.authorizations[id] = std::move(auth);
    } else if (ev == "Stage") {
        job = transition_job(job, event::Stage{});
    } else if (ev == "Start") {
        job = transition_job(job, event::Start{rec.payload.at("node").get<std::uint32_t>(), rec.t});
    } else if (ev == "Requeue") {
        job = transition_job(job, event::Requeue{});
    } else if (ev == "Cancel") {
        job = transition_job(job, event::Cancel{});
        if (auto it = s.authorizations.find(id); it != s.authorizations.end()) {
            exp.accounts.committed -= it->second.authorized_cost;
            s.authorizations.erase(it);
        }
    } else {
        throw Error(ErrorCode::CorruptJournal, "unknown job event '" + ev + "'");
    }
}

void apply_attempt_closed(EngineState& s, const JournalRecord& rec) {
    auto& exp = s.experiment;
    const auto id = job_of(rec.payload);
    auto& job = exp.job(id);
    if (job.state != JobState::Executing) {
        throw Error(ErrorCode::UnknownAttempt, "job " + std::to_string(id.value) + " has no open attempt");
    }
    const auto report = report_from(rec.payload);
    const auto ev = rec.payload.at("event").get<std::string>();
    const auto resource = *job.assigned_resource;
    if (ev == "Complete") {
        job = transition_job(job, event::Complete{report});
    } else if (ev == "Fail") {
        job = transition_job(job, event::Fail{report});
    } else {
        job = transition_job(job, event::Cancel{report});
    }
    const auto cost = rec.payload.at("cost").get<GridDollars>();
    exp.accounts.spent += cost;
    if (auto it = s.authorizations.find(id); it != s.authorizations.end()) {
        exp.accounts.committed -= it->second.authorized_cost;
        s.authorizations.erase(it);
    }
    auto& ledger = exp.accounts.per_resource[resource];
    ledger.cpu_seconds += report.cpu_seconds;
    ledger.cost += cost;
    if (report.outcome == AttemptOutcome::Success) {
        ++ledger.jobs_done;
        s.profiles = update_rate(std::move(s.profiles), job.attempts.back(), s.config.scheduler.smoothing_alpha);
        s.last_completion = std::max(s.last_completion.value_or(SimTime{0}), report.end);
    }
}

}  // namespace

json qos_to_json(const QoSConstraints& q) {
    return json{{"deadline_min", minutes_of(q.deadline)},
                {"budget", q.budget},
                {"strategy", std::string(to_string(q.strategy))},
                {"enforce_deadline", q.enforce_deadline},
                {"enforce_budget", q.enforce_budget}};
}

QoSConstraints qos_from_json(const json& j, const QoSConstraints& base) {
    QoSConstraints q = base;
    try {
        if (j.contains("deadline_min")) q.deadline = from_minutes(j.at("deadline_min").get<double>());
        if (j.contains("deadline")) q.deadline = from_minutes(j.at("deadline").get<double>());
        if (j.contains("budget")) {
            const auto& b = j.at("budget");
            if (!b.is_number_integer()) throw Error(ErrorCode::InvalidArgument, "budget must be an integer");
            q.budget = b.get<GridDollars>();
        }
        if (j.contains("strategy")) q.strategy = strategy_from_string(j.at("strategy").get<std::string>());
        if (j.contains("enforce_deadline")) q.enforce_deadline = j.at("enforce_deadline").get<bool>();
        if (j.contains("enforce_budget")) q.enforce_budget = j.at("enforce_budget").get<bool>();
    } catch (const json::exception& e) {
        throw Error(ErrorCode::InvalidArgument, std::string("malformed qos: ") + e.what());
    }
    return q;
}

json RunConfig::to_json() const {
    json j;
    j["experiment_id"] = experiment_id;
    j["consumer"] = consumer;
    j["plan"] = plan_text;
    j["testbed"] = json::parse(testbed_to_json(testbed));
    j["qos"] = qos_to_json(qos);
    j["seed"] = fabric.load.seed;
    j["max_load"] = fabric.load.max_load;
    j["stage_delay_s"] = to_seconds(fabric.stage_delay);
    j["task_error_probability"] = fabric.task_error_probability;
    j["smoothing_alpha"] = scheduler.smoothing_alpha;
    j["default_job_seconds"] = scheduler.default_job_seconds;
    j["calibration_jobs_per_resource"] = scheduler.calibration_jobs_per_resource;
    j["quantum_s"] = to_seconds(scheduler.quantum);
    j["nominal_job_seconds"] = nominal_job_seconds;
    j["job_jitter"] = job_jitter;
    j["retry_limit"] = retry_limit;
    j["lost_work_cpu_seconds"] = lost_work_cpu_seconds;
    j["max_price"] = max_price ? json(*max_price) : json(nullptr);
    return j;
}

RunConfig RunConfig::from_json(const json& j) {
    RunConfig c;
    c.experiment_id = j.at("experiment_id").get<std::string>();
    c.consumer = j.at("consumer").get<std::string>();
    c.plan_text = j.at("plan").get<std::string>();
    c.testbed = parse_testbed(j.at("testbed").dump());
    c.qos = qos_from_json(j.at("qos"));
    c.fabric.load.seed = j.at("seed").get<std::uint64_t>();
    c.fabric.load.max_load = j.at("max_load").get<double>();
    c.fabric.stage_delay = from_seconds(j.at("stage_delay_s").get<double>());
    c.fabric.task_error_probability = j.at("task_error_probability").get<double>();
    c.scheduler.smoothing_alpha = j.at("smoothing_alpha").get<double>();
    c.scheduler.default_job_seconds = j.at("default_job_seconds").get<double>();
    c.scheduler.calibration_jobs_per_resource = j.at("calibration_jobs_per_resource").get<std::uint32_t>();
    c.scheduler.quantum = from_seconds(j.at("quantum_s").get<double>());
    c.nominal_job_seconds = j.at("nominal_job_seconds").get<double>();
    c.job_jitter = j.at("job_jitter").get<double>();
    c.retry_limit = j.at("retry_limit").get<std::uint32_t>();
    c.lost_work_cpu_seconds = j.at("lost_work_cpu_seconds").get<std::int64_t>();
    if (!j.at("max_price").is_null()) c.max_price = j.at("max_price").get<GridDollars>();
    return c;
}

void apply(EngineState& s, const JournalRecord& rec) {
    auto& exp = s.experiment;
    if (!s.created && rec.kind != RecordKind::ExperimentCreated) {
        throw Error(ErrorCode::CorruptJournal, "journal does not start with ExperimentCreated");
    }
    switch (rec.kind) {
        case RecordKind::ExperimentCreated: {
            if (s.created) throw Error(ErrorCode::CorruptJournal, "experiment created twice");
            s.config = RunConfig::from_json(rec.payload.at("config"));
            exp = Experiment{};
            exp.id = s.config.experiment_id;
            exp.plan = parse_plan(s.config.plan_text);
            exp.qos = s.config.qos;
            exp.clock_origin = rec.t;
            std::uint32_t next = 1;
            for (auto& spec : expand_jobs(exp.plan)) {
                JobId id{next++};
                exp.jobs.push_back(make_job(s.config, id, std::move(spec.binding), std::move(spec.command), {}));
            }
            s.created = true;
            break;
        }
        case RecordKind::QoSChanged:
            exp = qos_update(std::move(exp), qos_from_json(rec.payload.at("qos")));
            break;
        case RecordKind::JobTransition:
            apply_transition(s, rec);
            break;
        case RecordKind::AttemptClosed:
            apply_attempt_closed(s, rec);
            break;
        case RecordKind::QuantumMark:
            ++s.quantum_marks;
            break;
        case RecordKind::AllocationDelta:
            exp.reschedule_requested = false;
            if (rec.payload.contains("infeasible") && !rec.payload.at("infeasible").is_null()) {
                const auto kind = rec.payload.at("infeasible").get<std::string>();
                s.last_infeasibility = kind == "DeadlineInfeasible" ? InfeasibilityKind::DeadlineInfeasible
                                                                    : InfeasibilityKind::BudgetInfeasible;
                ++s.infeasible_streak;
            } else {
                s.last_infeasibility.reset();
                s.infeasible_streak = 0;
            }
            break;
        case RecordKind::PhaseChanged: {
            const auto to = phase_from_string(rec.payload.at("to").get<std::string>());
            if (is_terminal(exp.phase)) throw Error(ErrorCode::ExperimentTerminal, "phase change after terminal phase");
            if (to == Phase::Paused) s.paused_from = exp.phase;
            exp.phase = to;
            break;
        }
        case RecordKind::JobsAdded:
            for (const auto& j : rec.payload.at("jobs")) {
                JobId id{static_cast<std::uint32_t>(exp.jobs.size() + 1)};
                std::optional<double> nominal;
                if (j.contains("nominal_cpu_seconds")) nominal = j.at("nominal_cpu_seconds").get<double>();
                exp.jobs.push_back(
                    make_job(s.config, id, binding_from(j.at("binding")), j.at("command").get<std::string>(), nominal));
            }
            break;
        case RecordKind::FailureInjected:
            s.injected_failures.push_back(InjectedFailure{rec.payload.at("resource").get<std::string>(),
                                                          from_seconds(rec.payload.at("at").get<double>()),
                                                          from_seconds(rec.payload.at("duration").get<double>())});
            break;
    }
    s.last_seq = rec.seq;
    s.last_t = rec.t;
}

void replay_each(std::span<const JournalRecord> records,
                 const std::function<void(const EngineState&, const JournalRecord&)>& visit) {
    EngineState s;
    for (const auto& rec : records) {
        if (rec.seq != s.last_seq + 1) {
            throw Error(ErrorCode::CorruptJournal, "sequence gap after " + std::to_string(s.last_seq) +
                                                       "; last good seq " + std::to_string(s.last_seq));
        }
        try {
            apply(s, rec);
        } catch (const Error& e) {
            if (e.code() == ErrorCode::CorruptJournal) throw;
            throw Error(ErrorCode::CorruptJournal, "record " + std::to_string(rec.seq) + " does not apply (" +
                                                       e.what() + "); last good seq " + std::to_string(s.last_seq));
        } catch (const std::exception& e) {
            throw Error(ErrorCode::CorruptJournal, "record " + std::to_string(rec.seq) + " is malformed (" +
                                                       e.what() + "); last good seq " + std::to_string(s.last_seq));
        }
        if (visit) visit(s, rec);
    }
}

EngineState replay(std::span<const JournalRecord> records) {
    EngineState out;
    if (records.empty()) return out;
    replay_each(records, [&](const EngineState& s, const JournalRecord& rec) {
        if (rec.seq == records.back().seq) out = s;
    });
    return out;
}

GridDollars allocation_cost(std::span<const std::int64_t> counts, std::span<const GridDollars> prices,
                            std::int64_t cpu_seconds_per_job) {
    if (counts.size() != prices.size()) {
        throw Error(ErrorCode::LengthMismatch,
                    std::to_string(counts.size()) + " counts vs " + std::to_string(prices.size()) + " prices");
    }
    if (cpu_seconds_per_job < 0) throw Error(ErrorCode::InvalidArgument, "negative cpu seconds");
    GridDollars total = 0;
    for (std::size_t i = 0; i < counts.size(); ++i) {
        if (counts[i] < 0 || prices[i] < 0) throw Error(ErrorCode::InvalidArgument, "negative count or price");
        total += counts[i] * prices[i] * cpu_seconds_per_job;
    }
    return total;
}

FarmingEngine::FarmingEngine(JournalSink& sink) : sink_(sink) {}

FarmingEngine FarmingEngine::recover(JournalSink& sink, std::span<const JournalRecord> records) {
    if (records.empty()) throw Error(ErrorCode::CorruptJournal, "empty journal; last good seq 0");
    FarmingEngine engine(sink);
    engine.state_ = replay(records);

    const SimTime now = engine.state_.last_t;
    std::vector<JobId> interrupted;
    for (const auto& job : engine.state_.experiment.jobs) {
        if (job.state == JobState::Scheduled || job.state == JobState::Staged || job.state == JobState::Executing) {
            interrupted.push_back(job.id);
        }
    }
    for (auto id : interrupted) {
        const auto& job = engine.state_.experiment.job(id);
        const auto auth = engine.state_.authorizations.at(id);
        if (job.state == JobState::Scheduled) engine.transition_record(id, "Stage", now);
        if (engine.state_.experiment.job(id).state == JobState::Staged) {
            engine.transition_record(id, "Start", now, json{{"node", auth.node}});
        }
        const auto& attempt = engine.state_.experiment.job(id).attempts.back();
        AttemptReport report;
        report.end = now;
        report.wall_seconds = to_seconds(now - attempt.start);
        report.cpu_seconds = std::min<std::int64_t>(engine.state_.config.lost_work_cpu_seconds,
                                                    static_cast<std::int64_t>(report.wall_seconds));
        report.outcome = AttemptOutcome::Preempted;
        engine.record_report(id, report, auth.price);
        engine.requeue(id, now);
    }
    return engine;
}

std::uint64_t FarmingEngine::persist_event(RecordKind kind, SimTime t, json payload) {
    if (halted_) throw Error(ErrorCode::StorageFailure, "engine halted after a storage failure");
    JournalRecord rec{state_.last_seq + 1, t, kind, std::move(payload)};
    EngineState next = state_;
    apply(next, rec);
    try {
        sink_.append(rec);
    } catch (const Error&) {
        halted_ = true;
        if (!is_terminal(state_.experiment.phase)) state_.experiment.phase = Phase::Paused;
        throw;
    }
    state_ = std::move(next);
    for (const auto& obs : observers_) obs(rec);
    return rec.seq;
}

void FarmingEngine::subscribe(std::function<void(const JournalRecord&)> observer) {
    observers_.push_back(std::move(observer));
}

void FarmingEngine::create(const RunConfig& config, SimTime t) {
    if (state_.created) throw Error(ErrorCode::InvalidArgument, "experiment already created");
    config.qos.validate();
    persist_event(RecordKind::ExperimentCreated, t, json{{"config", config.to_json()}});
}

void FarmingEngine::set_phase(Phase next, SimTime t, std::string_view reason) {
    const auto from = state_.experiment.phase;
    if (from == next) return;
    if (is_terminal(from)) throw Error(ErrorCode::ExperimentTerminal, "experiment is " + std::string(to_string(from)));
    persist_event(RecordKind::PhaseChanged, t,
                  json{{"from", std::string(to_string(from))}, {"to", std::string(to_string(next))},
                       {"reason", std::string(reason)}});
}

void FarmingEngine::change_qos(const QoSConstraints& qos, SimTime t) {
    // Validate against the model before anything reaches the journal.
    (void)qos_update(state_.experiment, qos);
    persist_event(RecordKind::QoSChanged, t, json{{"qos", qos_to_json(qos)}});
}

std::vector<JobId> FarmingEngine::add_jobs(const std::vector<JobSpec>& specs, SimTime t) {
    if (is_terminal(state_.experiment.phase)) throw Error(ErrorCode::ExperimentTerminal, "cannot add jobs");
    json jobs = json::array();
    std::vector<JobId> ids;
    auto next = static_cast<std::uint32_t>(state_.experiment.jobs.size() + 1);
    for (const auto& s : specs) {
        jobs.push_back(json{{"binding", binding_json(s.binding)}, {"command", s.command}});
        ids.push_back(JobId{next++});
    }
    if (!specs.empty()) persist_event(RecordKind::JobsAdded, t, json{{"jobs", jobs}});
    return ids;
}

void FarmingEngine::remove_jobs(const std::vector<JobId>& ids, SimTime t) {
    if (is_terminal(state_.experiment.phase)) throw Error(ErrorCode::ExperimentTerminal, "cannot remove jobs");
    for (auto id : ids) {
        const auto& job = state_.experiment.job(id);
        if (job.state == JobState::Executing || job.state == JobState::Staged || job.state == JobState::Scheduled) {
            throw Error(ErrorCode::JobExecuting, "job " + std::to_string(id.value) + " is executing");
        }
    }
    for (auto id : ids) {
        if (state_.experiment.job(id).state == JobState::Cancelled) continue;
        transition_record(id, "Cancel", t);
    }
}

std::vector<Job> FarmingEngine::query_jobs(const JobFilter& filter) const {
    std::vector<Job> out;
    for (const auto& job : state_.experiment.jobs) {
        if (filter.state && job.state != *filter.state) continue;
        if (filter.resource) {
            const bool on = job.assigned_resource == filter.resource ||
                            (!job.attempts.empty() && job.attempts.back().resource == *filter.resource);
            if (!on) continue;
        }
        out.push_back(job);
    }
    return out;
}

void FarmingEngine::mark_quantum(SimTime t) {
    persist_event(RecordKind::QuantumMark, t, json{{"index", state_.quantum_marks}});
}

void FarmingEngine::record_allocation(SimTime t, json payload) {
    persist_event(RecordKind::AllocationDelta, t, std::move(payload));
}

void FarmingEngine::note_failure(const InjectedFailure& f, SimTime t) {
    persist_event(RecordKind::FailureInjected, t,
                  json{{"resource", f.resource}, {"at", to_seconds(f.at)}, {"duration", to_seconds(f.duration)}});
}

void FarmingEngine::dispatch(JobId job, const ResourceId& resource, std::uint32_t node, GridDollars price,
                             GridDollars authorized_cost, SimTime t) {
    transition_record(job, "Assign", t,
                      json{{"resource", resource}, {"node", node}, {"price", price},
                           {"authorized_cost", authorized_cost}});
    transition_record(job, "Stage", t);
    transition_record(job, "Start", t, json{{"node", node}});
}

const Accounts& FarmingEngine::record_report(JobId id, const AttemptReport& report, GridDollars price, bool cancel) {
    if (!state_.experiment.has_job(id)) throw Error(ErrorCode::UnknownAttempt, "no such job " + std::to_string(id.value));
    const auto& job = state_.experiment.job(id);
    const auto* attempt = job.open_attempt();
    if (job.state != JobState::Executing || attempt == nullptr) {
        throw Error(ErrorCode::UnknownAttempt, "job " + std::to_string(id.value) + " has no open attempt");
    }
    std::string ev = report.outcome == AttemptOutcome::Success ? "Complete" : "Fail";
    if (cancel) ev = "Cancel";
    json p{{"job", id.value},
           {"event", ev},
           {"resource", attempt->resource},
           {"node", attempt->node},
           {"start", to_seconds(attempt->start)},
           {"end", to_seconds(report.end)},
           {"cpu_seconds", report.cpu_seconds},
           {"wall_seconds", report.wall_seconds},
           {"outcome", std::string(to_string(report.outcome))},
           {"price", price},
           {"cost", report.cpu_seconds * price}};
    persist_event(RecordKind::AttemptClosed, report.end, std::move(p));
    return state_.experiment.accounts;
}

void FarmingEngine::requeue(JobId job, SimTime t) { transition_record(job, "Requeue", t); }

void FarmingEngine::transition_record(JobId job, std::string_view event, SimTime t, json extra) {
    extra["job"] = job.value;
    extra["event"] = std::string(event);
    persist_event(RecordKind::JobTransition, t, std::move(extra));
}

}  // namespace gridbroker
