#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>
#include <thread>

#include "gridbroker/service.hpp"
#include "httplib.h"
#include "json.hpp"
#include "support.hpp"

using namespace gridbroker;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

json body_of(const HttpResponse& r) { return json::parse(r.body); }

std::string create_body(int jobs = 165, json qos = json{{"deadline_min", 120}, {"budget", 396000}, {"strategy", "cost"}}) {
    return json{{"plan", testing::sweep_plan(jobs)}, {"testbed", "wwg"}, {"qos", qos}, {"seed", 1}}.dump();
}

std::string drain(EventStream& s) {
    std::string out;
    while (auto f = s.next_frame(std::chrono::milliseconds(0))) out += *f;
    return out;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

int run_cli(const std::string& args) {
    const auto cmd = std::string(BROKER_EXE) + " " + args + " >/dev/null 2>&1";
    const int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

}  // namespace

TEST_SUITE("service") {
    TEST_CASE("create, inspect and run an experiment in manual mode") {
        BrokerService svc(ServiceOptions{0.0, "", seconds(60)});
        auto r = svc.handle("POST", "/experiments", create_body());
        REQUIRE(r.status == 201);
        const auto id = body_of(r).at("id").get<std::string>();

        r = svc.handle("GET", "/experiments", "");
        CHECK(body_of(r).at("experiments") == json::array({id}));

        r = svc.handle("GET", "/experiments/" + id, "");
        CHECK(r.status == 200);
        CHECK(body_of(r).at("phase") == "Created");
        CHECK(body_of(r).at("jobs").at("total") == 165);

        CHECK(svc.handle("GET", "/experiments/" + id + "/timeseries", "").status == 422);

        r = svc.handle("POST", "/experiments/" + id + "/start", "");
        CHECK(r.status == 200);
        CHECK(body_of(r).at("phase") == "Calibrating");
        svc.advance(id, minutes(200));
        r = svc.handle("GET", "/experiments/" + id, "");
        CHECK(body_of(r).at("phase") == "Completed");
        CHECK(body_of(r).at("jobs").at("by_state").at("Done") == 165);

        CHECK(svc.handle("POST", "/experiments/" + id + "/start", "").status == 409);
        CHECK(svc.handle("PATCH", "/experiments/" + id + "/qos", R"({"budget":1})").status == 409);

        r = svc.handle("GET", "/experiments/" + id + "/jobs?state=Done", "");
        CHECK(body_of(r).at("jobs").size() == 165);
        r = svc.handle("GET", "/experiments/" + id + "/jobs?state=Ready", "");
        CHECK(body_of(r).at("jobs").empty());
        CHECK(svc.handle("GET", "/experiments/" + id + "/jobs?state=Bogus", "").status == 422);

        r = svc.handle("GET", "/experiments/" + id + "/timeseries", "");
        CHECK(r.status == 200);
        CHECK(r.content_type == "text/csv");
        CHECK(r.body.rfind("t_min,resource,executing,done_cum,spent\n", 0) == 0);
        const auto fine = std::count(r.body.begin(), r.body.end(), '\n');
        r = svc.handle("GET", "/experiments/" + id + "/timeseries?interval=120", "");
        const auto coarse = std::count(r.body.begin(), r.body.end(), '\n');
        CHECK((coarse - 1) / 6 == ((fine - 1) / 6 + 1) / 2);
    }

    TEST_CASE("unknown ids and endpoints") {
        BrokerService svc(ServiceOptions{0.0, "", seconds(60)});
        CHECK(svc.handle("GET", "/experiments/nope", "").status == 404);
        CHECK(svc.handle("POST", "/experiments/nope/start", "").status == 404);
        CHECK(svc.handle("GET", "/nothing", "").status == 404);
        CHECK(svc.handle("GET", "/experiments/nope/events", "").status == 404);
        CHECK_THROWS(svc.open_stream("nope", 0));
    }

    TEST_CASE("invalid requests are rejected") {
        BrokerService svc(ServiceOptions{0.0, "", seconds(60)});
        auto r = svc.handle("POST", "/experiments", json{{"plan", "parameter x integer range from 1 to\n"}}.dump());
        CHECK(r.status == 422);
        CHECK(body_of(r).at("line") == 1);
        r = svc.handle("POST", "/experiments", create_body(5, json{{"budget", -5}}));
        CHECK(r.status == 422);
        r = svc.handle("POST", "/experiments", create_body(5, json{{"strategy", "fastest"}}));
        CHECK(r.status == 422);
        CHECK(svc.handle("POST", "/experiments", "not json").status == 422);
        CHECK(svc.handle("POST", "/experiments", "{}").status == 422);

        r = svc.handle("POST", "/experiments", create_body(5));
        const auto id = body_of(r).at("id").get<std::string>();
        CHECK(svc.handle("PATCH", "/experiments/" + id + "/qos", R"({"colour":"red"})").status == 422);
        CHECK(svc.handle("PATCH", "/experiments/" + id + "/qos", R"({"budget":"lots"})").status == 422);
        CHECK(svc.handle("PATCH", "/experiments/" + id + "/qos", R"({"deadline_min":-3})").status == 422);
        CHECK(svc.handle("POST", "/experiments/" + id + "/failures", R"({"resource":"nowhere","duration_min":5})").status == 422);
        CHECK(svc.handle("POST", "/experiments/" + id + "/failures", R"({"resource":"anl-sun"})").status == 422);
        CHECK(svc.handle("GET", "/experiments/" + id + "/timeseries?interval=0", "").status == 422);
        // rejected edits leave the experiment untouched
        CHECK(body_of(svc.handle("GET", "/experiments/" + id, "")).at("qos").at("budget") == 396000);
    }

    TEST_CASE("steering through PATCH replans within the quantum") {
        BrokerService svc(ServiceOptions{0.0, "", seconds(60)});
        const auto id = body_of(svc.handle("POST", "/experiments", create_body(165, json{{"deadline_min", 120}, {"budget", 396000}, {"strategy", "time"}}))).at("id").get<std::string>();
        svc.handle("POST", "/experiments/" + id + "/start", "");
        svc.advance(id, minutes(10) + seconds(15));
        auto r = svc.handle("PATCH", "/experiments/" + id + "/qos", R"({"budget":200000,"strategy":"cost"})");
        REQUIRE(r.status == 200);
        CHECK(body_of(r).at("qos").at("budget") == 200000);

        const auto records = parse_journal(svc.handle("GET", "/experiments/" + id + "/journal", "").body);
        const JournalRecord* changed = nullptr;
        const JournalRecord* delta = nullptr;
        for (const auto& rec : records) {
            if (rec.kind == RecordKind::QoSChanged) changed = &rec;
            if (changed && !delta && rec.kind == RecordKind::AllocationDelta) delta = &rec;
        }
        REQUIRE(changed);
        REQUIRE(delta);
        CHECK(delta->t - changed->t <= minutes(1));
        CHECK(delta->payload.at("reschedule_requested") == true);

        svc.advance(id, minutes(200));
        const auto snap = body_of(svc.handle("GET", "/experiments/" + id, ""));
        CHECK(snap.at("phase") == "Completed");
        CHECK(snap.at("accounts").at("spent").get<GridDollars>() <= 200000);
    }

    TEST_CASE("event streams replay the journal in order") {
        BrokerService svc(ServiceOptions{0.0, "", seconds(60)});
        const auto id = body_of(svc.handle("POST", "/experiments", create_body(30))).at("id").get<std::string>();
        auto a = svc.open_stream(id, 0);
        svc.handle("POST", "/experiments/" + id + "/start", "");
        svc.advance(id, minutes(5));
        auto b = svc.open_stream(id, 1);
        const auto head_a = drain(*a);
        CHECK(head_a == drain(*b));
        CHECK_FALSE(a->closed());

        const auto head = body_of(svc.handle("GET", "/experiments/" + id, "")).at("last_seq").get<std::uint64_t>();
        auto beyond = svc.open_stream(id, head + 1);
        CHECK(drain(*beyond).empty());

        svc.advance(id, minutes(300));
        const auto tail_a = drain(*a);
        const auto tail_b = drain(*b);
        CHECK(tail_a == tail_b);
        CHECK(a->closed());
        const std::string end_frame = "event: end\ndata: {}\n\n";
        REQUIRE(tail_a.size() >= end_frame.size());
        CHECK(tail_a.substr(tail_a.size() - end_frame.size()) == end_frame);

        // the frames carry the journal lines verbatim
        const auto journal = svc.handle("GET", "/experiments/" + id + "/journal", "").body;
        std::string expected;
        std::istringstream lines(journal);
        for (std::string line; std::getline(lines, line);) expected += "data: " + line + "\n\n";
        CHECK(head_a + tail_a == expected + "event: end\ndata: {}\n\n");

        // the new-from-head stream sees only later records
        const auto later = drain(*beyond);
        CHECK(expected.size() > later.size());
        CHECK(expected + "event: end\ndata: {}\n\n" != later);
        const auto first_line = later.substr(0, later.find('\n'));
        CHECK(json::parse(first_line.substr(6)).at("seq") == head + 1);

        // non-blocking endpoint form
        const auto via_http = svc.handle("GET", "/experiments/" + id + "/events?from=1", "");
        CHECK(via_http.content_type == "text/event-stream");
        CHECK(via_http.body == expected + "event: end\ndata: {}\n\n");
    }

    TEST_CASE("deleting an experiment closes its streams") {
        BrokerService svc(ServiceOptions{0.0, "", seconds(60)});
        const auto id = body_of(svc.handle("POST", "/experiments", create_body(10))).at("id").get<std::string>();
        auto s = svc.open_stream(id, 0);
        CHECK(svc.handle("DELETE", "/experiments/" + id, "").status == 200);
        const auto frames = drain(*s);
        CHECK(frames.find("event: error") != std::string::npos);
        CHECK(s->closed());
        CHECK(svc.handle("GET", "/experiments/" + id, "").status == 404);
    }

    TEST_CASE("failures posted over the API interrupt work") {
        BrokerService svc(ServiceOptions{0.0, "", seconds(60)});
        const auto id = body_of(svc.handle("POST", "/experiments", create_body())).at("id").get<std::string>();
        svc.handle("POST", "/experiments/" + id + "/start", "");
        svc.advance(id, minutes(15));
        CHECK(svc.handle("POST", "/experiments/" + id + "/failures", R"({"resource":"monash-linux","duration_min":5})").status == 200);
        svc.advance(id, minutes(15));
        const auto j = body_of(svc.handle("GET", "/experiments/" + id + "/jobs?resource=monash-linux&state=Executing", ""));
        CHECK(j.at("jobs").empty());
        svc.advance(id, minutes(300));
        CHECK(body_of(svc.handle("GET", "/experiments/" + id, "")).at("phase") == "Completed");
    }

    TEST_CASE("paced experiments advance with wall time and journal to disk") {
        const auto dir = fs::temp_directory_path() / "gridbroker-service-test";
        fs::remove_all(dir);
        std::string id;
        {
            BrokerService svc(ServiceOptions{60000.0, dir.string(), seconds(60)});
            id = body_of(svc.handle("POST", "/experiments", create_body(30))).at("id").get<std::string>();
            svc.handle("POST", "/experiments/" + id + "/start", "");
            auto s = svc.open_stream(id, 0);
            const auto deadline = std::chrono::steady_clock::now() + std::chrono::seconds(20);
            while (!s->closed() && std::chrono::steady_clock::now() < deadline) (void)s->next_frame(std::chrono::milliseconds(100));
            CHECK(s->closed());
            CHECK(body_of(svc.handle("GET", "/experiments/" + id, "")).at("phase") == "Completed");
            CHECK(slurp(dir / (id + ".jsonl")) == svc.handle("GET", "/experiments/" + id + "/journal", "").body);
        }
        fs::remove_all(dir);
    }

    TEST_CASE("over a socket") {
        BrokerService svc(ServiceOptions{0.0, "", seconds(60)});
        httplib::Server server;
        svc.mount(server);
        const int port = server.bind_to_any_port("127.0.0.1");
        REQUIRE(port > 0);
        std::thread t([&] { server.listen_after_bind(); });
        server.wait_until_ready();

        httplib::Client cli("127.0.0.1", port);
        auto r = cli.Post("/experiments", create_body(12), "application/json");
        REQUIRE(r);
        CHECK(r->status == 201);
        const auto id = json::parse(r->body).at("id").get<std::string>();
        r = cli.Post("/experiments/" + id + "/start", "", "application/json");
        CHECK(r->status == 200);
        svc.advance(id, minutes(300));

        std::string sse;
        auto res = cli.Get("/experiments/" + id + "/events?from=1", [&](const char* data, std::size_t n) {
            sse.append(data, n);
            return true;
        });
        REQUIRE(res);
        CHECK(res->status == 200);
        CHECK(res->get_header_value("Content-Type") == "text/event-stream");
        CHECK(sse == svc.handle("GET", "/experiments/" + id + "/events", "").body);

        r = cli.Get("/experiments/" + id + "/timeseries?interval=60");
        CHECK(r->status == 200);
        CHECK(r->body.rfind("t_min,", 0) == 0);
        r = cli.Get("/experiments/missing/events");
        CHECK(r->status == 404);
        r = cli.Patch("/experiments/" + id + "/qos", R"({"budget":5})", "application/json");
        CHECK(r->status == 409);

        server.stop();
        t.join();
    }
}

TEST_SUITE("cli") {
    TEST_CASE("exit codes and outputs") {
        const auto dir = fs::temp_directory_path() / "gridbroker-cli-test";
        fs::remove_all(dir);
        const auto plan = std::string(SOURCE_DIR) + "/data/wwg.pln --testbed " + SOURCE_DIR + "/data/wwg.testbed --seed 1";
        const auto qos = std::string(" --deadline 120 --budget 396000 --strategy cost");
        const auto a = dir / "a";
        const auto b = dir / "b";
        CHECK(run_cli("run " + plan + qos + " --out " + a.string()) == 0);
        CHECK(run_cli("run " + plan + qos + " --out " + b.string()) == 0);
        for (const auto* f : {"journal.jsonl", "timeseries.csv", "summary.json"}) {
            CHECK(fs::exists(a / f));
            CHECK(slurp(a / f) == slurp(b / f));
        }
        const auto summary = json::parse(slurp(a / "summary.json"));
        CHECK(summary.at("phase") == "Completed");
        CHECK(summary.at("jobs_done") == 165);

        CHECK(run_cli("run " + plan + " --deadline 1 --budget 396000 --strategy cost --out " + (dir / "c").string()) == 2);
        CHECK(run_cli("run " + plan + " --deadline 120 --budget 50000 --strategy cost --out " + (dir / "d").string()) == 3);
        CHECK(run_cli("run " + plan + qos + " --frobnicate") == 64);
        CHECK(run_cli("validate " + std::string(SOURCE_DIR) + "/data/wwg.pln") == 0);
        CHECK(run_cli("validate /nonexistent.pln") == 64);
        fs::create_directories(dir);
        std::ofstream(dir / "bad.pln") << "parameter x integer range from 1 to\n";
        CHECK(run_cli("validate " + (dir / "bad.pln").string()) == 1);
        fs::remove_all(dir);
    }
}
