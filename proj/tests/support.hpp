#pragma once

#include <string>
#include <vector>

#include "gridbroker/broker.hpp"
#include "gridbroker/engine.hpp"
#include "gridbroker/journal.hpp"

namespace testing {

using namespace gridbroker;

template <class F>
ErrorCode error_code_of(F&& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.code();
    }
    throw std::logic_error("expected an Error");
}

inline std::string sweep_plan(int n) {
    return "parameter x range from 1 to " + std::to_string(n) + " step 1\ntask main\nexecute ./model $x\nendtask\n";
}

inline RunConfig wwg_config(Strategy strategy, std::uint64_t seed = 1, int jobs = 165) {
    RunConfig c;
    c.experiment_id = "wwg";
    c.plan_text = sweep_plan(jobs);
    c.testbed = build_wwg();
    c.qos.deadline = minutes(120);
    c.qos.budget = 396000;
    c.qos.strategy = strategy;
    c.fabric.load.seed = seed;
    c.fabric.load.max_load = 0.25;
    return c;
}

inline Resource simple_resource(std::string id, std::uint32_t nodes, GridDollars price, double speed = 1.0) {
    Resource r;
    r.id = std::move(id);
    r.organization = "test";
    r.kind = "cluster";
    r.node_count = nodes;
    r.speed_factor = speed;
    r.price.base_price = price;
    return r;
}

/// Run to the end and return the journal.
inline std::vector<JournalRecord> run_to_end(const RunConfig& config) {
    MemoryJournal journal;
    Broker broker(config, journal);
    broker.start();
    broker.run();
    return journal.records();
}

}  // namespace testing
