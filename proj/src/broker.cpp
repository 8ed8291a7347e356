#include "gridbroker/broker.hpp"

#include <algorithm>
#include <cmath>

namespace gridbroker {

using nlohmann::json;

json RunSummary::to_json() const {
    json per = json::object();
    for (const auto& [r, n] : per_resource_jobs) per[r] = n;
    return json{{"experiment_id", experiment_id},
                {"phase", std::string(to_string(phase))},
                {"makespan_min", makespan_min},
                {"total_cost", total_cost},
                {"per_resource_jobs", per},
                {"jobs_done", jobs_done},
                {"jobs_total", jobs_total}};
}

Broker::Broker(RunConfig config, JournalSink& sink)
    : config_(config), fabric_(config.testbed, config.fabric), engine_(sink) {
    engine_.create(config_, fabric_.now());
    wire_fabric();
    for (const auto& r : config_.testbed) {
        for (const auto& f : r.failures) fabric_.inject_failure(r.id, f.at, f.duration);
    }
}

Broker::Broker(FarmingEngine engine, RunConfig config)
    : config_(std::move(config)), fabric_(config_.testbed, config_.fabric), engine_(std::move(engine)) {
    wire_fabric();
}

std::unique_ptr<Broker> Broker::recover(JournalSink& sink, std::span<const JournalRecord> records) {
    auto engine = FarmingEngine::recover(sink, records);
    auto config = engine.state().config;
    std::unique_ptr<Broker> b(new Broker(std::move(engine), std::move(config)));
    const SimTime now = b->engine_.state().last_t;
    b->fabric_.loop().set_clock(now);

    // Outages still in progress (or still to come) are re-armed from their
    // remaining duration.
    std::vector<InjectedFailure> failures;
    for (const auto& r : b->config_.testbed) {
        for (const auto& f : r.failures) failures.push_back(InjectedFailure{r.id, f.at, f.duration});
    }
    for (const auto& f : b->engine_.state().injected_failures) failures.push_back(f);
    for (const auto& f : failures) {
        const auto end = f.at + f.duration;
        if (end <= now) continue;
        const auto at = std::max(f.at, now);
        b->fabric_.inject_failure(f.resource, at, end - at);
    }

    const auto phase = b->experiment().phase;
    if (phase != Phase::Created && !is_terminal(phase)) {
        b->reschedule_pending_ = true;
        b->replan_reason_ = "recovery";
        b->schedule_tick(b->next_boundary(now));
    }
    return b;
}

void Broker::wire_fabric() {
    fabric_.on_resource_down([this](const ResourceId& id) { on_resource_down(id); });
    fabric_.on_resource_up([this](const ResourceId&) {
        reschedule_pending_ = true;
        replan_reason_ = "resource recovered";
    });
}

SimTime Broker::next_boundary(SimTime t) const {
    const auto q = config_.scheduler.quantum;
    const auto origin = experiment().clock_origin;
    if (t <= origin) return origin;
    const auto k = (t - origin + q - SimTime{1}) / q;
    return origin + q * k;
}

void Broker::schedule_tick(SimTime at) {
    if (tick_scheduled_) return;
    tick_scheduled_ = true;
    fabric_.loop().schedule(at, SimEventKind::QuantumTick, [this] {
        tick_scheduled_ = false;
        on_quantum();
    });
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

void Broker::start() {
    const auto phase = experiment().phase;
    if (phase == Phase::Paused) {
        resume();
        return;
    }
    if (phase != Phase::Created) {
        if (is_terminal(phase)) throw Error(ErrorCode::ExperimentTerminal, "experiment is " + std::string(to_string(phase)));
        return;
    }
    engine_.set_phase(Phase::Calibrating, now(), "start");
    schedule_tick(now());
}

void Broker::pause() {
    const auto phase = experiment().phase;
    if (is_terminal(phase)) throw Error(ErrorCode::ExperimentTerminal, "experiment is " + std::string(to_string(phase)));
    if (phase == Phase::Paused) return;
    if (phase == Phase::Created) throw Error(ErrorCode::IllegalTransition, "experiment has not started");
    engine_.set_phase(Phase::Paused, now(), "pause");
}

void Broker::resume() {
    const auto phase = experiment().phase;
    if (is_terminal(phase)) throw Error(ErrorCode::ExperimentTerminal, "experiment is " + std::string(to_string(phase)));
    if (phase != Phase::Paused) return;
    bool measured = true;
    for (const auto& r : fabric_.registry()) {
        if (fabric_.available(r.id) && engine_.state().profiles.find(r.id) == nullptr) measured = false;
    }
    engine_.set_phase(measured ? Phase::Running : Phase::Calibrating, now(), "resume");
    reschedule_pending_ = true;
    replan_reason_ = "resume";
    schedule_tick(now());
}

void Broker::stop() {
    const auto phase = experiment().phase;
    if (is_terminal(phase)) throw Error(ErrorCode::ExperimentTerminal, "experiment is " + std::string(to_string(phase)));
    // Cancel running agents; each is charged for the work done so far.
    const auto t = now();
    auto running = std::move(running_);
    running_.clear();
    for (const auto& [job, agent] : running) {
        fabric_.release(agent.run.resource, agent.run.node);
        const auto report = interrupted_report(agent.run, fabric_.config().stage_delay, t, AttemptOutcome::Preempted);
        engine_.record_report(job, report.attempt_report(), agent.price, true);
    }
    allocation_ = {};
    engine_.set_phase(Phase::Stopped, t, "stop");
}

void Broker::change_qos(const QoSConstraints& qos) {
    engine_.change_qos(qos, now());
    reschedule_pending_ = true;
    replan_reason_ = "qos changed";
    // Replan at once rather than waiting for the next quantum.
    if (experiment().phase == Phase::Running && !engine_.halted()) replan(quoted_resources());
}

std::vector<JobId> Broker::add_jobs(const std::vector<JobSpec>& specs) {
    auto ids = engine_.add_jobs(specs, now());
    reschedule_pending_ = true;
    replan_reason_ = "jobs added";
    return ids;
}

void Broker::remove_jobs(const std::vector<JobId>& ids) {
    engine_.remove_jobs(ids, now());
    reschedule_pending_ = true;
    replan_reason_ = "jobs removed";
    check_completion();
}

void Broker::inject_failure(const ResourceId& resource, SimTime at, SimTime duration) {
    if (!fabric_.has_resource(resource)) throw Error(ErrorCode::InvalidArgument, "unknown resource '" + resource + "'");
    if (at < now()) throw Error(ErrorCode::PastInstant, "failure scheduled in the past");
    if (duration <= SimTime{0}) throw Error(ErrorCode::InvalidArgument, "failure duration must be positive");
    engine_.note_failure(InjectedFailure{resource, at, duration}, now());
    fabric_.inject_failure(resource, at, duration);
}

void Broker::schedule_command(SimTime at, std::function<void(Broker&)> command) {
    fabric_.loop().schedule(std::max(at, now()), SimEventKind::ClientCommand,
                            [this, command = std::move(command)] { command(*this); });
}

// ---------------------------------------------------------------------------
// Event loop
// ---------------------------------------------------------------------------

bool Broker::finished() const { return is_terminal(experiment().phase) && running_.empty(); }

bool Broker::step() {
    if (finished() || fabric_.loop().empty()) return false;
    auto ev = fabric_.loop().advance();
    if (tracer_) tracer_(ev);
    return !finished();
}

void Broker::run() {
    while (step()) {
    }
}

void Broker::run_until(SimTime t) {
    while (!finished()) {
        const auto next = fabric_.loop().next_instant();
        if (!next || *next > t) break;
        step();
    }
    if (t > now()) fabric_.loop().set_clock(t);
}

// ---------------------------------------------------------------------------
// Quantum
// ---------------------------------------------------------------------------

std::vector<JobId> Broker::pending_jobs() const {
    std::vector<JobId> out;
    for (const auto& j : experiment().jobs) {
        if (j.state == JobState::Ready) out.push_back(j.id);
    }
    return out;
}

std::vector<QuotedResource> Broker::quoted_resources() const {
    std::vector<QuotedResource> quoted;
    try {
        quoted = discover_resources(fabric_, config_.consumer);
    } catch (const Error& e) {
        if (e.code() != ErrorCode::NoResources) throw;
        return {};
    }
    for (auto& q : quoted) {
        for (const auto& [job, agent] : running_) {
            if (agent.run.resource == q.id) q.executing_until.push_back(agent.run.finishes);
        }
    }
    return quoted;
}

PlanningInput Broker::planning_input(const std::vector<QuotedResource>& quoted) const {
    PlanningInput in;
    in.jobs = pending_jobs();
    in.resources = quoted;
    in.profiles = engine_.state().profiles;
    in.qos = experiment().qos;
    // The deadline is relative to the experiment's start.
    in.qos.deadline = experiment().clock_origin + experiment().qos.deadline;
    in.spent = engine_.accounts().spent;
    in.committed = engine_.accounts().committed;
    in.now = now();
    in.config = config_.scheduler;
    return in;
}

std::int64_t Broker::authorized_cpu(JobId job, const ResourceId& resource) const {
    const auto& r = fabric_.resource(resource);
    const double est = estimated_job_seconds(engine_.state().profiles, resource, config_.scheduler);
    const double nominal = experiment().job(job).nominal_cpu_seconds.value_or(config_.nominal_job_seconds);
    const auto own = static_cast<std::int64_t>(std::ceil(nominal / r.speed_factor - 1e-9));
    return std::max<std::int64_t>({1, estimated_cpu_seconds(est), own});
}

void Broker::on_quantum() {
    const auto t = now();
    const auto phase = experiment().phase;
    if (is_terminal(phase) || phase == Phase::Created || engine_.halted()) return;

    engine_.mark_quantum(t);
    schedule_tick(t + config_.scheduler.quantum);
    if (phase == Phase::Paused) return;

    check_completion();
    if (is_terminal(experiment().phase)) return;

    const auto& qos = experiment().qos;
    if (qos.enforce_deadline && t > experiment().clock_origin + qos.deadline) {
        enter_terminal(Phase::FailedDeadline, "deadline passed with jobs outstanding");
        return;
    }

    const auto quoted = quoted_resources();
    if (experiment().phase == Phase::Calibrating) {
        bool measured = true;
        for (const auto& q : quoted) {
            if (engine_.state().profiles.find(q.id) == nullptr) measured = false;
        }
        if (!measured) {
            calibrate_step(quoted);
            return;
        }
        engine_.set_phase(Phase::Running, t, "calibrated");
        reschedule_pending_ = true;
        replan_reason_ = "calibrated";
    }
    replan(quoted);
}

void Broker::calibrate_step(const std::vector<QuotedResource>& quoted) {
    std::vector<QuotedResource> idle;
    for (const auto& q : quoted) {
        if (engine_.state().profiles.find(q.id) == nullptr && q.executing_until.empty()) idle.push_back(q);
    }
    const auto jobs = pending_jobs();
    if (idle.empty() || jobs.empty()) return;
    dispatch(calibrate(idle, jobs, config_.scheduler), quoted);
}

void Broker::replan(const std::vector<QuotedResource>& quoted) {
    const auto t = now();
    const bool requested = reschedule_pending_ || experiment().reschedule_requested;
    const auto reason = replan_reason_.empty() ? std::string("quantum") : replan_reason_;
    reschedule_pending_ = false;
    replan_reason_.clear();

    if (pending_jobs().empty()) {
        allocation_ = {};
        // A requested replan is still journaled so steering stays observable.
        if (requested) {
            engine_.record_allocation(t, json{{"reason", reason},
                                              {"reschedule_requested", true},
                                              {"infeasible", nullptr},
                                              {"estimated_completion_min", to_minutes(t)},
                                              {"estimated_cost", 0},
                                              {"moves", json::array()},
                                              {"counts", json::object()}});
        }
        return;
    }

    const auto in = planning_input(quoted);
    std::variant<Rebalance, Infeasibility> result = Infeasibility{InfeasibilityKind::DeadlineInfeasible, "no resources"};
    if (!quoted.empty()) result = rebalance(allocation_, in);

    if (const auto* bad = std::get_if<Infeasibility>(&result)) {
        json p{{"reason", reason},
               {"reschedule_requested", requested},
               {"infeasible", std::string(to_string(bad->kind))},
               {"detail", bad->detail},
               {"moves", json::array()},
               {"counts", json::object()}};
        engine_.record_allocation(t, std::move(p));
        allocation_ = {};
        if (engine_.state().infeasible_streak >= 2) {
            enter_terminal(bad->kind == InfeasibilityKind::BudgetInfeasible ? Phase::FailedBudget : Phase::FailedDeadline,
                           bad->detail);
        }
        return;
    }

    auto& rb = std::get<Rebalance>(result);
    if (!rb.delta.empty() || requested || engine_.state().infeasible_streak > 0) {
        json moves = json::array();
        for (const auto& m : rb.delta) {
            moves.push_back(json{{"job", m.job.value},
                                 {"from", m.from ? json(*m.from) : json(nullptr)},
                                 {"to", m.to ? json(*m.to) : json(nullptr)}});
        }
        json counts = json::object();
        for (const auto& [r, n] : rb.allocation.counts()) counts[r] = n;
        engine_.record_allocation(t, json{{"reason", reason},
                                          {"reschedule_requested", requested},
                                          {"infeasible", nullptr},
                                          {"estimated_completion_min", to_minutes(rb.allocation.estimated_completion)},
                                          {"estimated_cost", rb.allocation.estimated_cost},
                                          {"moves", std::move(moves)},
                                          {"counts", std::move(counts)}});
    }
    allocation_ = std::move(rb.allocation);
    dispatch(allocation_, quoted);
}

void Broker::dispatch(const Allocation& allocation, const std::vector<QuotedResource>& quoted) {
    const auto t = now();
    DispatchInput in;
    in.allocation = &allocation;
    in.fabric = &fabric_;
    in.accounts = engine_.accounts();
    in.qos = experiment().qos;
    for (const auto& q : quoted) in.quotes.emplace(q.id, q.quote);
    in.authorized_cpu_seconds = [this](JobId j, const ResourceId& r) { return authorized_cpu(j, r); };
    in.max_price = config_.max_price.value_or(0);
    in.now = t;

    const auto result = dispatch_quantum(in);
    if (result.reschedule_requested) reschedule_pending_ = true;

    for (const auto& action : result.actions) {
        engine_.dispatch(action.job, action.resource, action.node, action.contract.price, action.authorized_cost, t);
        fabric_.occupy(action.resource, action.node, action.job);
        const auto& job = experiment().job(action.job);
        const double nominal = job.nominal_cpu_seconds.value_or(config_.nominal_job_seconds);
        auto run = agent_execute(action, fabric_, nominal, job.attempts.size(), t);
        const auto token = next_token_++;
        const auto finishes = run.finishes;
        running_[action.job] = RunningAgent{std::move(run), action.contract.price, token};
        fabric_.loop().schedule(finishes, SimEventKind::AgentDone,
                                [this, id = action.job, token] { on_agent_done(id, token); });
    }

    // Dispatched jobs leave the plan; the rest wait for free nodes.
    if (!result.actions.empty() && &allocation == &allocation_) {
        for (auto& plan : allocation_.plans) {
            std::erase_if(plan.queue, [&](JobId j) { return running_.count(j) != 0; });
        }
        std::erase_if(allocation_.plans, [](const ResourcePlan& p) { return p.queue.empty(); });
    }
}

// ---------------------------------------------------------------------------
// Agent reports
// ---------------------------------------------------------------------------

void Broker::on_agent_done(JobId job, std::uint64_t token) {
    auto it = running_.find(job);
    if (it == running_.end() || it->second.token != token) return;  // superseded by a failure or stop
    const auto agent = std::move(it->second);
    running_.erase(it);
    fabric_.release(agent.run.resource, agent.run.node);
    handle_report(job, completion_report(agent.run), agent.price);
    // A freed node can take the next queued job straight away.
    if (experiment().phase == Phase::Running && !allocation_.plans.empty()) dispatch(allocation_, quoted_resources());
}

void Broker::on_resource_down(const ResourceId& id) {
    reschedule_pending_ = true;
    replan_reason_ = "resource failure";
    std::vector<JobId> hit;
    for (const auto& [job, agent] : running_) {
        if (agent.run.resource == id) hit.push_back(job);
    }
    for (auto job : hit) {
        const auto agent = std::move(running_.at(job));
        running_.erase(job);
        fabric_.release(agent.run.resource, agent.run.node);
        handle_report(job, interrupted_report(agent.run, fabric_.config().stage_delay, now()), agent.price);
    }
    for (auto& plan : allocation_.plans) {
        if (plan.resource == id) plan.queue.clear();
    }
    std::erase_if(allocation_.plans, [](const ResourcePlan& p) { return p.queue.empty(); });
}

void Broker::handle_report(JobId job, const AgentReport& report, GridDollars price) {
    engine_.record_report(job, report.attempt_report(), price);
    const auto cls = detect_error(report.exit, experiment().job(job).task_errors(), config_.retry_limit);
    if (cls == ErrorClass::FailAndRequeue) {
        engine_.requeue(job, report.end);
        reschedule_pending_ = true;
        if (replan_reason_.empty()) replan_reason_ = "attempt failed";
    }
    check_completion();
}

void Broker::check_completion() {
    const auto& exp = experiment();
    if (is_terminal(exp.phase) || exp.phase == Phase::Created) return;
    if (exp.all_jobs_finished()) {
        engine_.set_phase(Phase::Completed, now(), "all jobs done");
        allocation_ = {};
        return;
    }
    // Jobs that exhausted their retries can never finish.
    bool progress_possible = false;
    bool stuck = false;
    for (const auto& j : exp.jobs) {
        if (j.state == JobState::Failed) stuck = true;
        else if (!is_terminal(j.state)) progress_possible = true;
    }
    if (stuck && !progress_possible) enter_terminal(Phase::Stopped, "retry limit exhausted");
}

void Broker::enter_terminal(Phase phase, std::string_view reason) {
    allocation_ = {};
    engine_.set_phase(phase, now(), reason);
}

// ---------------------------------------------------------------------------

RunSummary Broker::summary() const {
    const auto& exp = experiment();
    RunSummary s;
    s.experiment_id = exp.id;
    s.phase = exp.phase;
    if (const auto& last = engine_.state().last_completion) s.makespan_min = to_minutes(*last - exp.clock_origin);
    s.total_cost = exp.accounts.spent;
    for (const auto& r : config_.testbed) {
        const auto it = exp.accounts.per_resource.find(r.id);
        s.per_resource_jobs[r.id] = it == exp.accounts.per_resource.end() ? 0 : it->second.jobs_done;
    }
    s.jobs_done = exp.count(JobState::Done);
    s.jobs_total = exp.jobs.size();
    return s;
}

}  // namespace gridbroker
