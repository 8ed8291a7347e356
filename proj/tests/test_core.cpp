#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "gridbroker/model.hpp"
#include "gridbroker/plan.hpp"
#include "gridbroker/trading.hpp"
#include "support.hpp"

using namespace gridbroker;
using testing::error_code_of;

namespace {

Job ready_job(std::uint32_t id = 1) {
    Job j;
    j.id = JobId{id};
    j.command = "sim";
    return j;
}

Job executing_job() {
    auto j = transition_job(ready_job(), event::Assign{"r1"});
    j = transition_job(j, event::Stage{});
    return transition_job(j, event::Start{0, seconds(10)});
}

AttemptReport report(AttemptOutcome o, std::int64_t cpu = 300) {
    return AttemptReport{seconds(320), cpu, 310.0, o};
}

}  // namespace

TEST_SUITE("job lifecycle") {
    TEST_CASE("assign moves a ready job to Scheduled") {
        const auto j = transition_job(ready_job(), event::Assign{"r1"});
        CHECK(j.state == JobState::Scheduled);
        CHECK(j.assigned_resource == ResourceId("r1"));
    }

    TEST_CASE("complete closes exactly one attempt") {
        const auto j = transition_job(executing_job(), event::Complete{report(AttemptOutcome::Success)});
        CHECK(j.state == JobState::Done);
        REQUIRE(j.attempts.size() == 1);
        CHECK(j.attempts[0].outcome == AttemptOutcome::Success);
        CHECK(j.attempts[0].cpu_seconds == 300);
        CHECK(j.open_attempt() == nullptr);
    }

    TEST_CASE("start on a Done job is illegal and leaves it untouched") {
        const auto done = transition_job(executing_job(), event::Complete{report(AttemptOutcome::Success)});
        CHECK(error_code_of([&] { (void)transition_job(done, event::Start{0, seconds(1)}); }) ==
              ErrorCode::IllegalTransition);
        CHECK(done.state == JobState::Done);
    }

    TEST_CASE("fail then requeue returns to Ready with the attempt kept") {
        auto j = transition_job(executing_job(), event::Fail{report(AttemptOutcome::ResourceFailure, 150)});
        CHECK(j.state == JobState::Failed);
        j = transition_job(j, event::Requeue{});
        CHECK(j.state == JobState::Ready);
        CHECK(j.attempts.size() == 1);
        CHECK(j.task_errors() == 0);
    }

    TEST_CASE("complete requires a successful report") {
        CHECK(error_code_of([&] {
                  (void)transition_job(executing_job(), event::Complete{report(AttemptOutcome::TaskError)});
              }) == ErrorCode::IllegalTransition);
        CHECK(error_code_of([&] {
                  (void)transition_job(executing_job(), event::Fail{report(AttemptOutcome::Success)});
              }) == ErrorCode::IllegalTransition);
    }

    TEST_CASE("cancel closes an open attempt as preempted") {
        const auto j = transition_job(executing_job(), event::Cancel{});
        CHECK(j.state == JobState::Cancelled);
        CHECK(j.attempts.back().outcome == AttemptOutcome::Preempted);
        CHECK(error_code_of([&] { (void)transition_job(j, event::Cancel{}); }) == ErrorCode::IllegalTransition);
    }

    TEST_CASE("every illegal pairing is rejected") {
        const std::vector<JobEvent> events = {event::Assign{"r"}, event::Stage{}, event::Start{0, seconds(1)},
                                              event::Complete{report(AttemptOutcome::Success)},
                                              event::Fail{report(AttemptOutcome::TaskError)}, event::Requeue{}};
        // state -> index of the only legal event
        const auto states = std::vector<std::pair<Job, int>>{
            {ready_job(), 0},
            {transition_job(ready_job(), event::Assign{"r"}), 1},
            {transition_job(transition_job(ready_job(), event::Assign{"r"}), event::Stage{}), 2},
        };
        for (const auto& [job, legal] : states) {
            for (int i = 0; i < static_cast<int>(events.size()); ++i) {
                if (i == legal) continue;
                CHECK(error_code_of([&] { (void)transition_job(job, events[i]); }) == ErrorCode::IllegalTransition);
            }
        }
    }
}

TEST_SUITE("qos") {
    TEST_CASE("mid-run budget change sets the replan flag") {
        Experiment e;
        e.phase = Phase::Running;
        e.qos.budget = 396000;
        auto next = e.qos;
        next.budget = 200000;
        const auto out = qos_update(e, next);
        CHECK(out.reschedule_requested);
        CHECK(out.qos.budget == 200000);
    }

    TEST_CASE("identical qos still sets the flag") {
        Experiment e;
        e.phase = Phase::Running;
        e.qos.budget = 10;
        const auto out = qos_update(e, e.qos);
        CHECK(out.reschedule_requested);
        CHECK(out.qos == e.qos);
    }

    TEST_CASE("terminal experiments reject updates") {
        Experiment e;
        e.phase = Phase::Completed;
        CHECK(error_code_of([&] { (void)qos_update(e, e.qos); }) == ErrorCode::ExperimentTerminal);
    }

    TEST_CASE("negative budget and non-positive deadline are invalid") {
        Experiment e;
        e.phase = Phase::Running;
        auto bad = e.qos;
        bad.budget = -1;
        CHECK(error_code_of([&] { (void)qos_update(e, bad); }) == ErrorCode::InvalidArgument);
        bad = e.qos;
        bad.deadline = SimTime{0};
        CHECK(error_code_of([&] { (void)qos_update(e, bad); }) == ErrorCode::InvalidArgument);
    }
}

TEST_SUITE("plan") {
    TEST_CASE("range parameter") {
        const auto p = parse_plan("parameter x range from 1 to 3 step 1\ntask main\nexecute sim $x\nendtask");
        REQUIRE(p.parameters.size() == 1);
        CHECK(p.parameters[0].cardinality() == 3);
        CHECK(p.parameters[0].values() == std::vector<std::string>{"1", "2", "3"});
        CHECK(p.task.execute == "sim $x");
    }

    TEST_CASE("undeclared placeholder is reported with its position") {
        try {
            (void)parse_plan("parameter x range from 1 to 3 step 1\ntask main\nexecute sim $y\nendtask");
            FAIL("expected a diagnostic");
        } catch (const PlanError& e) {
            CHECK(e.code() == ErrorCode::UndeclaredParameter);
            CHECK(e.line() == 3);
            CHECK(e.column() == 13);
            CHECK(std::string(e.what()).find("y") != std::string::npos);
        }
    }

    TEST_CASE("select domain") {
        const auto p = parse_plan("parameter p select anyof a b c\ntask main\nexecute run $p\nendtask\n");
        REQUIRE(std::holds_alternative<SelectDomain>(p.parameters[0].domain));
        CHECK(p.parameters[0].cardinality() == 3);
    }

    TEST_CASE("labels, comments, quoting and staging") {
        const auto p = parse_plan(
            "# sweep\n"
            "parameter angle float range from 0 to 1 step 0.25  # five values\n"
            "parameter mode select anyof \"fast run\" slow\n"
            "parameter tag single v1\n"
            "task main\n"
            "  copy in.$tag node:in\n"
            "  execute solver --angle $angle --mode \"$mode\"\n"
            "endtask\n");
        REQUIRE(p.parameters.size() == 3);
        CHECK(p.parameters[0].label == "float");
        CHECK(p.parameters[0].values() == std::vector<std::string>{"0", "0.25", "0.5", "0.75", "1"});
        CHECK(std::get<SelectDomain>(p.parameters[1].domain).values == std::vector<std::string>{"fast run", "slow"});
        REQUIRE(p.task.staging.size() == 1);
        CHECK(p.task.staging[0].source == "in.$tag");
        const auto jobs = expand_jobs(p);
        CHECK(jobs.size() == 10);
        CHECK(jobs.front().command == "solver --angle 0 --mode \"fast run\"");
        CHECK(jobs.back().command == "solver --angle 1 --mode \"slow\"");
    }

    TEST_CASE("grammar errors") {
        const auto code = [](std::string_view text) {
            try {
                (void)parse_plan(text);
            } catch (const PlanError& e) {
                return e.code();
            }
            return ErrorCode::InvalidArgument;
        };
        CHECK(code("parameter p select anyof\ntask main\nexecute x\nendtask") == ErrorCode::EmptyDomain);
        CHECK(code("parameter p single 1\nparameter p single 2\ntask main\nexecute x\nendtask") ==
              ErrorCode::DuplicateParameter);
        CHECK(code("parameter x range from 1 to\ntask main\nexecute x\nendtask") == ErrorCode::SyntaxError);
        CHECK(code("task main\nexecute x\n") == ErrorCode::SyntaxError);
        CHECK(code("task main\nendtask") == ErrorCode::SyntaxError);
        CHECK(code("parameter x range from 3 to 1 step 1\ntask main\nexecute $x\nendtask") == ErrorCode::SyntaxError);
        CHECK(code("task main\ncopy $q b\nexecute x\nendtask") == ErrorCode::UndeclaredParameter);
    }

    TEST_CASE("cross product sizes") {
        const auto p = parse_plan(
            "parameter a range from 1 to 3 step 1\nparameter b select anyof q r s t u\ntask main\nexecute $a $b\nendtask");
        const auto jobs = expand_jobs(p);
        CHECK(jobs.size() == 15);
        // first parameter varies slowest
        CHECK(jobs[0].command == "1 q");
        CHECK(jobs[1].command == "1 r");
        CHECK(jobs[5].command == "2 q");
    }

    TEST_CASE("the 165-value sweep") {
        CHECK(expand_jobs(parse_plan(testing::sweep_plan(165))).size() == 165);
    }

    TEST_CASE("no parameters gives one literal job") {
        const auto jobs = expand_jobs(parse_plan("task main\nexecute echo hello\nendtask"));
        REQUIRE(jobs.size() == 1);
        CHECK(jobs[0].command == "echo hello");
        CHECK(jobs[0].binding.empty());
    }

    TEST_CASE("substitution") {
        CHECK(substitute("run $x --p $y", {{"x", "2"}, {"y", "a"}}) == "run 2 --p a");
        CHECK(substitute("cost $$5 $x", {{"x", "1"}}) == "cost $5 1");
        CHECK(error_code_of([] { (void)substitute("run $z", {{"x", "1"}}); }) == ErrorCode::MissingBinding);
        CHECK(substitute("a $xy $x", {{"x", "1"}, {"xy", "2"}}) == "a 2 1");
        CHECK(placeholders("$a $$b $c $a") == std::vector<std::string>{"a", "c"});
    }

    TEST_CASE("number formatting") {
        CHECK(format_number(2.0) == "2");
        CHECK(format_number(-3.0) == "-3");
        CHECK(format_number(0.1) == "0.1");
        CHECK(format_number(2.5) == "2.5");
    }
}

TEST_SUITE("trading") {
    Resource monash() { return testing::simple_resource("monash-linux", 60, 2); }

    TEST_CASE("off-peak default consumer pays the base price") {
        CHECK(quoted_price(monash().price, "default", seconds(0)) == 2);
    }

    TEST_CASE("peak multiplier applies inside the window only") {
        auto r = monash();
        r.price.peak_multiplier = 1.5;
        r.price.peak_window = DailyWindow{minutes(9 * 60), minutes(17 * 60)};
        CHECK(quoted_price(r.price, "default", minutes(10 * 60)) == 3);
        CHECK(quoted_price(r.price, "default", minutes(8 * 60)) == 2);
        // the window recurs daily
        CHECK(quoted_price(r.price, "default", minutes(24 * 60 + 10 * 60)) == 3);
    }

    TEST_CASE("window wrapping midnight") {
        const DailyWindow w{minutes(22 * 60), minutes(2 * 60)};
        CHECK(w.contains(minutes(23 * 60)));
        CHECK(w.contains(minutes(60)));
        CHECK_FALSE(w.contains(minutes(12 * 60)));
    }

    TEST_CASE("identity consumer factor keeps the base price") {
        auto r = monash();
        r.price.consumer_overrides["alice"] = 1.0;
        CHECK(quoted_price(r.price, "alice", seconds(0)) == r.price.base_price);
        r.price.consumer_overrides["bob"] = 1.25;  // 2.5 rounds half-up
        CHECK(quoted_price(r.price, "bob", seconds(0)) == 3);
    }

    TEST_CASE("posted prices ignore market factors") {
        auto r = monash();
        r.price.model = PriceModel::PostedPrice;
        r.price.peak_multiplier = 3.0;
        r.price.peak_window = DailyWindow{SimTime{0}, minutes(24 * 60 - 1)};
        r.price.consumer_overrides["alice"] = 2.0;
        CHECK(quoted_price(r.price, "alice", minutes(5)) == 2);
    }

    TEST_CASE("quotes of unavailable resources fail") {
        CHECK(error_code_of([&] { (void)quote(monash(), "default", seconds(0), false); }) ==
              ErrorCode::ResourceUnavailable);
    }

    TEST_CASE("negotiation") {
        auto q = quote(testing::simple_resource("a", 1, 2), "default", seconds(0), true);
        auto deal = negotiate(ContractRequest{"a", 8}, q, seconds(10));
        REQUIRE(std::holds_alternative<Contract>(deal));
        CHECK(std::get<Contract>(deal).price == 2);

        q = quote(testing::simple_resource("b", 1, 8), "default", seconds(0), true);
        deal = negotiate(ContractRequest{"b", 7}, q, seconds(10));
        REQUIRE(std::holds_alternative<Rejection>(deal));
        CHECK(std::get<Rejection>(deal).reason == RejectionReason::TooExpensive);

        deal = negotiate(ContractRequest{"b", 100}, q, q.valid_until + seconds(1));
        REQUIRE(std::holds_alternative<Rejection>(deal));
        CHECK(std::get<Rejection>(deal).reason == RejectionReason::QuoteExpired);
        CHECK(q.valid_until - q.valid_from == kDefaultQuoteTtl);
    }
}
