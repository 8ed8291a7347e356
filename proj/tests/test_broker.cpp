#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <limits>
#include <map>
#include <set>

#include "gridbroker/broker.hpp"
#include "gridbroker/timeseries.hpp"
#include "support.hpp"

using namespace gridbroker;
using testing::error_code_of;

namespace {

std::vector<const JournalRecord*> of_kind(const std::vector<JournalRecord>& records, RecordKind kind) {
    std::vector<const JournalRecord*> out;
    for (const auto& r : records) {
        if (r.kind == kind) out.push_back(&r);
    }
    return out;
}

bool is_event(const JournalRecord& r, std::string_view ev) {
    return r.kind == RecordKind::JobTransition && r.payload.at("event") == ev;
}

}  // namespace

TEST_SUITE("broker") {
    TEST_CASE("cost-optimised WWG run") {
        MemoryJournal journal;
        Broker b(testing::wwg_config(Strategy::CostOpt), journal);
        b.start();
        b.run();
        const auto& exp = b.experiment();
        CHECK(exp.phase == Phase::Completed);
        CHECK(exp.count(JobState::Done) == 165);
        const auto s = b.summary();
        CHECK(s.makespan_min <= 120.0);
        CHECK(s.total_cost <= 396000);
        CHECK(s.total_cost == exp.accounts.spent);
        CHECK(s.per_resource_jobs.at("monash-linux") * 10 >= 165 * 8);
        CHECK(exp.accounts.committed == 0);

        // Calibration sends exactly one job to each resource before the first plan.
        const auto& recs = journal.records();
        std::map<std::string, int> calibration;
        for (const auto& r : recs) {
            if (r.kind == RecordKind::PhaseChanged && r.payload.at("to") == "Running") break;
            if (is_event(r, "Assign")) ++calibration[r.payload.at("resource").get<std::string>()];
        }
        CHECK(calibration.size() == 6);
        for (const auto& [id, n] : calibration) CHECK(n == 1);

        // Accounting identity over closed attempts.
        GridDollars total = 0;
        std::map<std::string, GridDollars> per;
        for (const auto* r : of_kind(recs, RecordKind::AttemptClosed)) {
            const auto cost = r->payload.at("cpu_seconds").get<std::int64_t>() * r->payload.at("price").get<GridDollars>();
            CHECK(cost == r->payload.at("cost").get<GridDollars>());
            total += cost;
            per[r->payload.at("resource").get<std::string>()] += cost;
        }
        CHECK(total == exp.accounts.spent);
        for (const auto& [id, ledger] : exp.accounts.per_resource) CHECK(per[id] == ledger.cost);
    }

    TEST_CASE("time-optimised WWG run beats cost-optimised on time, loses on cost") {
        const auto cost = testing::run_to_end(testing::wwg_config(Strategy::CostOpt));
        const auto time = testing::run_to_end(testing::wwg_config(Strategy::TimeOpt));
        const auto sc = replay(cost);
        const auto st = replay(time);
        CHECK(st.experiment.phase == Phase::Completed);
        CHECK(*st.last_completion < *sc.last_completion);
        CHECK(st.experiment.accounts.spent > sc.experiment.accounts.spent);
        for (const auto& r : build_wwg()) CHECK(st.experiment.accounts.per_resource.at(r.id).jobs_done >= 1);
    }

    TEST_CASE("an impossible deadline fails the experiment") {
        auto cfg = testing::wwg_config(Strategy::CostOpt);
        cfg.qos.deadline = minutes(1);
        MemoryJournal j;
        Broker b(cfg, j);
        b.start();
        b.run();
        CHECK(b.experiment().phase == Phase::FailedDeadline);
        CHECK(b.experiment().accounts.committed == 0);
    }

    TEST_CASE("a budget too small for the sweep fails after the grace quantum") {
        auto cfg = testing::wwg_config(Strategy::CostOpt);
        cfg.qos.budget = 50000;
        MemoryJournal j;
        Broker b(cfg, j);
        b.start();
        b.run();
        CHECK(b.experiment().phase == Phase::FailedBudget);
        const auto deltas = of_kind(j.records(), RecordKind::AllocationDelta);
        REQUIRE(deltas.size() >= 2);
        CHECK(deltas[deltas.size() - 1]->payload.at("infeasible") == "BudgetInfeasible");
        CHECK(deltas[deltas.size() - 2]->payload.at("infeasible") == "BudgetInfeasible");
        CHECK(b.experiment().accounts.spent <= 50000);
    }

    TEST_CASE("resource failure interrupts and requeues running jobs") {
        auto cfg = testing::wwg_config(Strategy::CostOpt);
        MemoryJournal j;
        Broker b(cfg, j);
        b.start();
        b.inject_failure("monash-linux", minutes(10), minutes(10));
        b.run();
        CHECK(b.experiment().phase == Phase::Completed);
        std::set<std::uint32_t> interrupted;
        for (const auto* r : of_kind(j.records(), RecordKind::AttemptClosed)) {
            if (r->payload.at("outcome") == "ResourceFailure") {
                CHECK(r->payload.at("resource") == "monash-linux");
                CHECK(r->t == minutes(10));
                interrupted.insert(r->payload.at("job").get<std::uint32_t>());
            }
        }
        CHECK(!interrupted.empty());
        for (auto id : interrupted) CHECK(b.experiment().job(JobId{id}).state == JobState::Done);
        // nothing was placed on the failed resource while it was down
        for (const auto& r : j.records()) {
            if (is_event(r, "Assign") && r.payload.at("resource") == "monash-linux") {
                CHECK((r.t < minutes(10) || r.t >= minutes(20)));
            }
        }
    }

    TEST_CASE("failure of an idle resource only changes availability") {
        auto cfg = testing::wwg_config(Strategy::CostOpt);
        MemoryJournal j;
        Broker b(cfg, j);
        b.start();
        b.inject_failure("isi-sgi", minutes(30), minutes(10));
        b.run();
        for (const auto* r : of_kind(j.records(), RecordKind::AttemptClosed)) {
            CHECK(r->payload.at("outcome") != "ResourceFailure");
        }
        CHECK(b.experiment().phase == Phase::Completed);
        CHECK(error_code_of([&] { b.inject_failure("isi-sgi", minutes(1), minutes(1)); }) == ErrorCode::PastInstant);
    }

    TEST_CASE("task errors exhaust the retry limit") {
        RunConfig cfg;
        cfg.plan_text = testing::sweep_plan(2);
        cfg.testbed = {testing::simple_resource("r", 2, 1)};
        cfg.qos.budget = 1'000'000;
        cfg.fabric.task_error_probability = 1.0;
        MemoryJournal j;
        Broker b(cfg, j);
        b.start();
        b.run();
        CHECK(b.experiment().phase == Phase::Stopped);
        for (const auto& job : b.experiment().jobs) {
            CHECK(job.state == JobState::Failed);
            CHECK(job.task_errors() == 4);
        }
    }

    TEST_CASE("stop cancels running agents and releases commitments") {
        MemoryJournal j;
        Broker b(testing::wwg_config(Strategy::CostOpt), j);
        b.start();
        b.run_until(minutes(12));
        CHECK(b.experiment().count(JobState::Executing) > 0);
        b.stop();
        CHECK(b.finished());
        CHECK(b.experiment().phase == Phase::Stopped);
        CHECK(b.experiment().count(JobState::Executing) == 0);
        CHECK(b.experiment().accounts.committed == 0);
        CHECK(error_code_of([&] { b.start(); }) == ErrorCode::ExperimentTerminal);
        CHECK(error_code_of([&] { b.stop(); }) == ErrorCode::ExperimentTerminal);
    }

    TEST_CASE("pause holds dispatch until resume") {
        MemoryJournal j;
        Broker b(testing::wwg_config(Strategy::CostOpt), j);
        b.start();
        b.run_until(minutes(8));
        b.pause();
        const auto paused_at = b.now();
        b.run_until(minutes(30));
        for (const auto& r : j.records()) {
            if (r.t > paused_at) CHECK_FALSE(is_event(r, "Assign"));
        }
        CHECK(b.experiment().phase == Phase::Paused);
        b.resume();
        b.run();
        CHECK(b.experiment().phase == Phase::Completed);
    }

    TEST_CASE("a qos change replans at once") {
        MemoryJournal j;
        Broker b(testing::wwg_config(Strategy::TimeOpt), j);
        b.start();
        b.run_until(minutes(9) + seconds(30));
        REQUIRE(b.experiment().phase == Phase::Running);
        auto q = b.experiment().qos;
        q.budget = 200000;
        q.strategy = Strategy::CostOpt;
        b.change_qos(q);
        const auto& recs = j.records();
        auto it = std::find_if(recs.begin(), recs.end(), [](const JournalRecord& r) { return r.kind == RecordKind::QoSChanged; });
        REQUIRE(it != recs.end());
        auto delta = std::find_if(it, recs.end(), [](const JournalRecord& r) { return r.kind == RecordKind::AllocationDelta; });
        REQUIRE(delta != recs.end());
        CHECK(delta->payload.at("reschedule_requested") == true);
        CHECK(delta->t - it->t <= b.experiment().qos.deadline);
        CHECK(delta->t == it->t);
        b.run();
        CHECK(b.experiment().phase == Phase::Completed);
        CHECK(b.experiment().accounts.spent <= 200000);
    }

    TEST_CASE("a qos change with nothing left to place is still journaled") {
        MemoryJournal j;
        Broker b(testing::wwg_config(Strategy::TimeOpt), j);
        b.start();
        while (b.experiment().phase != Phase::Running || b.experiment().count(JobState::Ready) > 0) {
            REQUIRE(b.step());
        }
        REQUIRE_FALSE(b.finished());
        auto q = b.experiment().qos;
        q.strategy = Strategy::CostOpt;
        b.change_qos(q);
        const auto& last = j.records().back();
        CHECK(last.kind == RecordKind::AllocationDelta);
        CHECK(last.t == b.now());
        CHECK(last.payload.at("counts").empty());
        CHECK(last.payload.at("reschedule_requested") == true);
    }

    TEST_CASE("a budget cut below spent plus committed stops new dispatch") {
        MemoryJournal j;
        Broker b(testing::wwg_config(Strategy::CostOpt), j);
        b.start();
        b.run_until(minutes(10));
        REQUIRE(b.experiment().accounts.committed > 0);
        auto q = b.experiment().qos;
        q.budget = b.experiment().accounts.spent;
        b.change_qos(q);
        const auto cut_seq = j.records().back().seq;
        b.run();
        GridDollars held = std::numeric_limits<GridDollars>::max();
        replay_each(j.records(), [&](const EngineState& s, const JournalRecord& r) {
            if (r.seq < cut_seq) return;
            CHECK_FALSE(is_event(r, "Assign"));
            const auto now_held = s.experiment.accounts.spent + s.experiment.accounts.committed;
            CHECK(now_held <= held);
            held = now_held;
        });
        CHECK(b.experiment().phase == Phase::FailedBudget);
        CHECK(b.experiment().accounts.committed == 0);
    }

    TEST_CASE("jobs added mid-run are executed") {
        MemoryJournal j;
        Broker b(testing::wwg_config(Strategy::CostOpt, 1, 20), j);
        b.start();
        b.run_until(minutes(7));
        const auto ids = b.add_jobs(std::vector<JobSpec>(10, JobSpec{{{"x", "99"}}, "./model 99"}));
        CHECK(ids.size() == 10);
        b.run();
        CHECK(b.experiment().phase == Phase::Completed);
        CHECK(b.experiment().count(JobState::Done) == 30);
    }

    TEST_CASE("the event trace is identical across runs") {
        const auto trace = [] {
            std::vector<std::tuple<std::int64_t, std::uint64_t, SimEventKind>> out;
            MemoryJournal j;
            Broker b(testing::wwg_config(Strategy::TimeOpt, 3), j);
            b.trace([&](const SimEvent& e) { out.emplace_back(e.instant.count(), e.ordinal, e.kind); });
            b.start();
            b.inject_failure("anl-sun", minutes(5), minutes(3));
            b.run();
            return std::make_pair(out, journal_text(j.records()));
        };
        const auto a = trace();
        const auto b = trace();
        CHECK(a.first == b.first);
        CHECK(a.second == b.second);
        for (std::size_t i = 1; i < a.first.size(); ++i) CHECK(std::get<0>(a.first[i - 1]) <= std::get<0>(a.first[i]));
    }

    TEST_CASE("recovery after a crash finishes the same jobs") {
        const auto full = testing::run_to_end(testing::wwg_config(Strategy::CostOpt, 2, 40));
        for (std::size_t cut : {std::size_t{1}, std::size_t{10}, full.size() / 3, full.size() / 2, full.size() - 1}) {
            std::vector<JournalRecord> prefix(full.begin(), full.begin() + static_cast<std::ptrdiff_t>(cut));
            MemoryJournal j;
            for (const auto& r : prefix) j.append(r);
            auto b = Broker::recover(j, prefix);
            if (b->experiment().phase == Phase::Created) b->start();
            b->run();
            CHECK(b->experiment().phase == Phase::Completed);
            CHECK(b->experiment().count(JobState::Done) == 40);
            CHECK(replay(j.records()).experiment.accounts == b->experiment().accounts);
        }
    }
}

TEST_SUITE("timeseries") {
    TEST_CASE("fresh experiment has no data") {
        MemoryJournal j;
        Broker b(testing::wwg_config(Strategy::CostOpt), j);
        CHECK(error_code_of([&] { (void)export_timeseries(j.records()); }) == ErrorCode::NoData);
    }

    TEST_CASE("final row group and sampling") {
        const auto recs = testing::run_to_end(testing::wwg_config(Strategy::CostOpt));
        const auto points = sample_timeseries(recs);
        REQUIRE(points.size() % 6 == 0);
        std::int64_t done = 0;
        GridDollars spent = 0;
        for (std::size_t i = points.size() - 6; i < points.size(); ++i) {
            done += points[i].cumulative_done;
            spent += points[i].spent;
            CHECK(points[i].jobs_executing == 0);
        }
        CHECK(done == 165);
        CHECK(spent == replay(recs).experiment.accounts.spent);

        const auto coarse = sample_timeseries(recs, seconds(120));
        const auto instants = points.size() / 6;
        CHECK(coarse.size() / 6 == (instants + 1) / 2);

        for (const auto& p : points) {
            CHECK(p.jobs_executing >= 0);
            CHECK(p.jobs_executing <= 60);
        }
        const auto csv = export_timeseries(recs);
        CHECK(csv.rfind("t_min,resource,executing,done_cum,spent\n", 0) == 0);
        CHECK(csv.find("\n1,monash-linux,") != std::string::npos);
        CHECK(static_cast<std::size_t>(std::count(csv.begin(), csv.end(), '\n')) == points.size() + 1);
    }
}
