#include "gridbroker/scheduler.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <queue>

namespace gridbroker {

namespace {

/// Planning view of one quoted resource.
struct Candidate {
    const QuotedResource* quoted = nullptr;
    double job_seconds = 0;
    std::int64_t job_cpu = 0;
    GridDollars job_cost = 0;  // price * estimated cpu seconds
    bool measured = false;
    std::vector<SimTime> node_free;  // one per offered node, ascending
};

std::vector<Candidate> candidates(const PlanningInput& in) {
    std::vector<Candidate> out;
    out.reserve(in.resources.size());
    for (const auto& r : in.resources) {
        Candidate c;
        c.quoted = &r;
        c.measured = in.profiles.find(r.id) != nullptr;
        c.job_seconds = estimated_job_seconds(in.profiles, r.id, in.config);
        c.job_cpu = estimated_cpu_seconds(c.job_seconds);
        c.job_cost = c.job_cpu * r.quote.price;
        auto busy = r.executing_until;
        std::sort(busy.begin(), busy.end());
        for (std::size_t k = 0; k < r.available_nodes; ++k) {
            c.node_free.push_back(k < busy.size() ? std::max(in.now, busy[k]) : in.now);
        }
        std::sort(c.node_free.begin(), c.node_free.end());
        out.push_back(std::move(c));
    }
    return out;
}

std::size_t executing_on(const QuotedResource& r) { return r.executing_until.size(); }

/// Jobs placeable on `c` with completion no later than `t`.
std::int64_t slots_until(const Candidate& c, SimTime t, std::int64_t cap) {
    const auto step = from_seconds(c.job_seconds);
    std::int64_t n = 0;
    for (const auto free : c.node_free) {
        if (t < free + step) continue;
        n += (t - free) / step;
        if (n >= cap) return cap;
    }
    return n;
}

/// Completion of the last of `count` jobs placed earliest-first on `c`.
SimTime completion_of(const Candidate& c, std::size_t count) {
    if (count == 0 || c.node_free.empty()) return SimTime{0};
    const auto step = from_seconds(c.job_seconds);
    std::priority_queue<SimTime, std::vector<SimTime>, std::greater<>> free(c.node_free.begin(), c.node_free.end());
    SimTime last{0};
    for (std::size_t i = 0; i < count; ++i) {
        const auto t = free.top() + step;
        free.pop();
        free.push(t);
        last = std::max(last, t);
    }
    return last;
}

/// Placement limit for unmeasured resources: the calibration allotment.
std::int64_t unmeasured_limit(const Candidate& c) {
    return std::max<std::int64_t>(0, 1 - static_cast<std::int64_t>(executing_on(*c.quoted)));
}

Allocation build_allocation(const std::vector<Candidate>& order, const std::vector<std::size_t>& counts,
                            const std::vector<JobId>& jobs) {
    Allocation a;
    std::size_t next = 0;
    SimTime completion{0};
    for (std::size_t i = 0; i < order.size(); ++i) {
        if (counts[i] == 0) continue;
        ResourcePlan plan{order[i].quoted->id, {}};
        plan.queue.assign(jobs.begin() + static_cast<std::ptrdiff_t>(next),
                          jobs.begin() + static_cast<std::ptrdiff_t>(next + counts[i]));
        next += counts[i];
        a.estimated_cost += static_cast<GridDollars>(counts[i]) * order[i].job_cost;
        completion = std::max(completion, completion_of(order[i], counts[i]));
        a.plans.push_back(std::move(plan));
    }
    a.estimated_completion = completion;
    return a;
}

GridDollars remaining_budget(const PlanningInput& in) {
    if (!in.qos.enforce_budget) return std::numeric_limits<GridDollars>::max();
    return in.qos.budget - in.spent - in.committed;
}

Allocation empty_allocation(const PlanningInput& in) {
    Allocation a;
    a.estimated_completion = in.now;
    return a;
}

}  // namespace

const RateEntry* RateProfile::find(const ResourceId& id) const {
    auto it = entries.find(id);
    return it == entries.end() ? nullptr : &it->second;
}

RateProfile update_rate(RateProfile profile, const AttemptRecord& report, double alpha) {
    if (report.outcome != AttemptOutcome::Success) return profile;
    auto [it, inserted] = profile.entries.try_emplace(report.resource);
    auto& e = it->second;
    if (inserted || e.samples == 0) {
        e.measured_job_seconds = report.wall_seconds;
    } else {
        e.measured_job_seconds = alpha * report.wall_seconds + (1.0 - alpha) * e.measured_job_seconds;
    }
    ++e.samples;
    e.last_updated = report.end.value_or(report.start);
    return profile;
}

std::int64_t capacity_by_deadline(std::uint32_t available_nodes, const RateEntry* rate, SimTime now, SimTime deadline) {
    if (rate == nullptr) return 1;
    if (deadline <= now) return 0;
    const auto per_node = static_cast<std::int64_t>(std::floor(to_seconds(deadline - now) / rate->measured_job_seconds + 1e-9));
    return per_node * static_cast<std::int64_t>(available_nodes);
}

std::size_t Allocation::total_jobs() const {
    std::size_t n = 0;
    for (const auto& p : plans) n += p.queue.size();
    return n;
}

std::size_t Allocation::count(const ResourceId& id) const {
    for (const auto& p : plans) {
        if (p.resource == id) return p.queue.size();
    }
    return 0;
}

std::optional<ResourceId> Allocation::resource_of(JobId job) const {
    for (const auto& p : plans) {
        if (std::find(p.queue.begin(), p.queue.end(), job) != p.queue.end()) return p.resource;
    }
    return std::nullopt;
}

std::map<ResourceId, std::size_t> Allocation::counts() const {
    std::map<ResourceId, std::size_t> out;
    for (const auto& p : plans) out[p.resource] = p.queue.size();
    return out;
}

std::string_view to_string(InfeasibilityKind k) {
    return k == InfeasibilityKind::DeadlineInfeasible ? "DeadlineInfeasible" : "BudgetInfeasible";
}

double estimated_job_seconds(const RateProfile& profiles, const ResourceId& id, const SchedulerConfig& config) {
    const auto* e = profiles.find(id);
    return e != nullptr ? e->measured_job_seconds : config.default_job_seconds;
}

std::int64_t estimated_cpu_seconds(double job_seconds) {
    return std::max<std::int64_t>(1, static_cast<std::int64_t>(std::ceil(job_seconds - 1e-9)));
}

std::vector<QuotedResource> discover_resources(const Fabric& fabric, std::string_view consumer, SimTime ttl) {
    if (fabric.registry().empty()) throw Error(ErrorCode::NoResources, "resource registry is empty");
    std::vector<QuotedResource> out;
    for (const auto& r : fabric.registry()) {
        if (!fabric.available(r.id)) continue;
        out.push_back(QuotedResource{r.id, quote(r, consumer, fabric.now(), true, ttl), fabric.offered_nodes(r.id), {}});
    }
    if (out.empty()) throw Error(ErrorCode::NoResources, "no resource is currently available");
    return out;
}

Allocation calibrate(const std::vector<QuotedResource>& resources, const std::vector<JobId>& jobs,
                     const SchedulerConfig& config) {
    if (resources.empty()) throw Error(ErrorCode::NoResources, "nothing to calibrate");
    std::vector<const QuotedResource*> order;
    for (const auto& r : resources) order.push_back(&r);
    std::stable_sort(order.begin(), order.end(), [](const QuotedResource* a, const QuotedResource* b) {
        if (a->quote.price != b->quote.price) return a->quote.price < b->quote.price;
        return a->id < b->id;
    });
    Allocation a;
    std::size_t next = 0;
    GridDollars cost = 0;
    for (const auto* r : order) {
        if (next >= jobs.size()) break;
        const std::size_t n = std::min<std::size_t>({r->available_nodes, config.calibration_jobs_per_resource,
                                                     jobs.size() - next});
        if (n == 0) continue;
        ResourcePlan plan{r->id, {}};
        for (std::size_t k = 0; k < n; ++k) plan.queue.push_back(jobs[next++]);
        cost += static_cast<GridDollars>(n) * estimated_cpu_seconds(config.default_job_seconds) * r->quote.price;
        a.plans.push_back(std::move(plan));
    }
    a.estimated_cost = cost;
    return a;
}

ScheduleResult schedule_cost_opt(const PlanningInput& in) {
    const auto n = static_cast<std::int64_t>(in.jobs.size());
    if (n == 0) return empty_allocation(in);

    auto cands = candidates(in);
    std::vector<std::int64_t> capacity(cands.size());
    for (std::size_t i = 0; i < cands.size(); ++i) {
        const auto& c = cands[i];
        if (!c.measured) {
            capacity[i] = unmeasured_limit(c);
        } else if (!in.qos.enforce_deadline) {
            capacity[i] = c.node_free.empty() ? 0 : n;
        } else {
            // Slots that finish by the deadline once the busy nodes free up.
            capacity[i] = slots_until(c, in.qos.deadline, n);
        }
        if (c.node_free.empty()) capacity[i] = 0;
    }

    std::vector<std::size_t> idx(cands.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        if (cands[a].job_cost != cands[b].job_cost) return cands[a].job_cost < cands[b].job_cost;
        if (capacity[a] != capacity[b]) return capacity[a] > capacity[b];
        return cands[a].quoted->id < cands[b].quoted->id;
    });

    std::vector<Candidate> order;
    std::vector<std::size_t> counts;
    std::int64_t left = n;
    for (auto i : idx) {
        const auto take = std::min(left, capacity[i]);
        order.push_back(cands[i]);
        counts.push_back(static_cast<std::size_t>(take));
        left -= take;
    }
    if (left > 0) {
        return Infeasibility{InfeasibilityKind::DeadlineInfeasible,
                             std::to_string(left) + " of " + std::to_string(n) + " jobs exceed deadline capacity"};
    }
    auto a = build_allocation(order, counts, in.jobs);
    if (a.estimated_cost > remaining_budget(in)) {
        return Infeasibility{InfeasibilityKind::BudgetInfeasible,
                             "cheapest placement costs " + std::to_string(a.estimated_cost) + " G$, " +
                                 std::to_string(remaining_budget(in)) + " G$ left"};
    }
    return a;
}

ScheduleResult schedule_time_opt(const PlanningInput& in) {
    const auto n = static_cast<std::int64_t>(in.jobs.size());
    if (n == 0) return empty_allocation(in);

    auto cands = candidates(in);
    std::sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
        if (a.job_cost != b.job_cost) return a.job_cost < b.job_cost;
        if (a.quoted->quote.price != b.quoted->quote.price) return a.quoted->quote.price < b.quoted->quote.price;
        return a.quoted->id < b.quoted->id;
    });
    std::vector<std::int64_t> limit(cands.size(), n);
    for (std::size_t i = 0; i < cands.size(); ++i) {
        if (!cands[i].measured) limit[i] = unmeasured_limit(cands[i]);
        if (cands[i].node_free.empty()) limit[i] = 0;
    }

    // Every instant at which some placement would complete.
    std::vector<SimTime> instants;
    for (std::size_t i = 0; i < cands.size(); ++i) {
        const auto step = from_seconds(cands[i].job_seconds);
        for (const auto free : cands[i].node_free) {
            for (std::int64_t m = 1; m <= std::min(n, limit[i]); ++m) instants.push_back(free + step * m);
        }
    }
    std::sort(instants.begin(), instants.end());
    instants.erase(std::unique(instants.begin(), instants.end()), instants.end());

    const GridDollars budget = remaining_budget(in);
    // Cheapest fill of n jobs using only placements done by `t`.
    const auto fill = [&](SimTime t, std::vector<std::size_t>& counts) -> std::pair<bool, GridDollars> {
        counts.assign(cands.size(), 0);
        std::int64_t left = n;
        GridDollars cost = 0;
        for (std::size_t i = 0; i < cands.size() && left > 0; ++i) {
            const auto take = std::min({left, limit[i], slots_until(cands[i], t, left)});
            counts[i] = static_cast<std::size_t>(take);
            cost += take * cands[i].job_cost;
            left -= take;
        }
        return {left == 0, cost};
    };

    std::vector<std::size_t> counts;
    std::size_t lo = 0;
    std::size_t hi = instants.size();
    bool any_complete = false;
    while (lo < hi) {
        const auto mid = lo + (hi - lo) / 2;
        const auto [complete, cost] = fill(instants[mid], counts);
        any_complete = any_complete || complete;
        if (complete && cost <= budget) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    if (lo == instants.size()) {
        if (!instants.empty() && fill(instants.back(), counts).first) {
            return Infeasibility{InfeasibilityKind::BudgetInfeasible,
                                 "no placement of " + std::to_string(n) + " jobs fits " + std::to_string(budget) +
                                     " G$"};
        }
        return Infeasibility{InfeasibilityKind::DeadlineInfeasible,
                             "resources cannot hold " + std::to_string(n) + " jobs"};
    }
    fill(instants[lo], counts);
    auto a = build_allocation(cands, counts, in.jobs);
    if (in.qos.enforce_deadline && a.estimated_completion > in.qos.deadline) {
        return Infeasibility{InfeasibilityKind::DeadlineInfeasible,
                             "earliest completion at " + std::to_string(to_minutes(a.estimated_completion)) +
                                 " min is past the deadline"};
    }
    return a;
}

ScheduleResult schedule(const PlanningInput& in) {
    return in.qos.strategy == Strategy::TimeOpt ? schedule_time_opt(in) : schedule_cost_opt(in);
}

std::variant<Rebalance, Infeasibility> rebalance(const Allocation& previous, const PlanningInput& in) {
    auto result = schedule(in);
    if (auto* bad = std::get_if<Infeasibility>(&result)) return *bad;
    const auto& target = std::get<Allocation>(result);

    std::map<JobId, ResourceId> before;
    for (const auto& p : previous.plans) {
        for (auto j : p.queue) {
            if (std::find(in.jobs.begin(), in.jobs.end(), j) != in.jobs.end()) before.emplace(j, p.resource);
        }
    }

    Rebalance out;
    out.allocation.estimated_completion = target.estimated_completion;
    out.allocation.estimated_cost = target.estimated_cost;

    std::map<JobId, bool> placed;
    for (const auto& tp : target.plans) {
        ResourcePlan plan{tp.resource, {}};
        for (const auto& pp : previous.plans) {
            if (pp.resource != tp.resource) continue;
            for (auto j : pp.queue) {
                if (plan.queue.size() >= tp.queue.size()) break;
                if (std::find(in.jobs.begin(), in.jobs.end(), j) == in.jobs.end()) continue;
                plan.queue.push_back(j);
                placed[j] = true;
            }
        }
        out.allocation.plans.push_back(std::move(plan));
    }

    auto pool = in.jobs.begin();
    for (std::size_t i = 0; i < target.plans.size(); ++i) {
        auto& plan = out.allocation.plans[i];
        while (plan.queue.size() < target.plans[i].queue.size()) {
            while (placed.count(*pool) != 0) ++pool;
            plan.queue.push_back(*pool);
            placed[*pool] = true;
            ++pool;
        }
    }

    for (const auto& plan : out.allocation.plans) {
        for (auto j : plan.queue) {
            auto it = before.find(j);
            if (it == before.end() || it->second != plan.resource) {
                out.delta.push_back(JobMove{j, it == before.end() ? std::nullopt : std::optional(it->second),
                                            plan.resource});
            }
        }
    }
    for (const auto& [j, r] : before) {
        if (placed.count(j) == 0) out.delta.push_back(JobMove{j, r, std::nullopt});
    }
    return out;
}

}  // namespace gridbroker
