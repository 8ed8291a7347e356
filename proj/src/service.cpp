#include "gridbroker/service.hpp"

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "httplib.h"
#include "json.hpp"

#include "gridbroker/timeseries.hpp"

namespace gridbroker {

using nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Feed: committed journal lines shared by every stream of an experiment.
// ---------------------------------------------------------------------------

struct EventStream::Feed {
    std::mutex m;
    std::condition_variable cv;
    std::vector<std::string> lines;  // lines[i] has seq i + 1
    bool ended = false;
    std::string end_frame;

    void push(std::string line) {
        {
            std::lock_guard lock(m);
            lines.push_back(std::move(line));
        }
        cv.notify_all();
    }
    void end(std::string frame) {
        {
            std::lock_guard lock(m);
            if (ended) return;
            ended = true;
            end_frame = std::move(frame);
        }
        cv.notify_all();
    }
};

std::optional<std::string> EventStream::next_frame(std::chrono::milliseconds timeout) {
    if (closed_) return std::nullopt;
    std::unique_lock lock(feed_->m);
    feed_->cv.wait_for(lock, timeout, [&] { return feed_->lines.size() >= next_seq_ || feed_->ended; });
    if (feed_->lines.size() >= next_seq_) {
        return "data: " + feed_->lines[next_seq_++ - 1] + "\n\n";
    }
    if (feed_->ended) {
        closed_ = true;
        return feed_->end_frame;
    }
    return std::nullopt;
}

namespace {

const std::string kEndFrame = "event: end\ndata: {}\n\n";
const std::string kDeletedFrame = "event: error\ndata: {\"error\":\"experiment deleted\"}\n\n";

/// Writes through to the durable sink, then publishes the line.
class TeeJournal final : public JournalSink {
public:
    TeeJournal(std::unique_ptr<JournalSink> inner, std::shared_ptr<EventStream::Feed> feed)
        : inner_(std::move(inner)), feed_(std::move(feed)) {}

    void append(const JournalRecord& record) override {
        inner_->append(record);
        feed_->push(record.to_line());
    }

private:
    std::unique_ptr<JournalSink> inner_;
    std::shared_ptr<EventStream::Feed> feed_;
};

std::string feed_text(EventStream::Feed& feed) {
    std::lock_guard lock(feed.m);
    std::string out;
    for (const auto& l : feed.lines) out += l + '\n';
    return out;
}

struct NotFound {
    std::string what;
};

int status_for(ErrorCode code) {
    switch (code) {
        case ErrorCode::ExperimentTerminal:
        case ErrorCode::IllegalTransition:
        case ErrorCode::JobExecuting:
            return 409;
        case ErrorCode::SyntaxError:
        case ErrorCode::UndeclaredParameter:
        case ErrorCode::DuplicateParameter:
        case ErrorCode::EmptyDomain:
        case ErrorCode::MissingBinding:
        case ErrorCode::ConfigError:
        case ErrorCode::InvalidArgument:
        case ErrorCode::PastInstant:
        case ErrorCode::NoData:
            return 422;
        case ErrorCode::UnknownJob:
            return 404;
        default:
            return 500;
    }
}

HttpResponse json_response(int status, const json& body) { return HttpResponse{status, "application/json", body.dump()}; }

HttpResponse error_response(int status, std::string_view code, std::string_view message, json extra = json::object()) {
    extra["error"] = std::string(code);
    extra["message"] = std::string(message);
    return json_response(status, extra);
}

std::vector<std::string> split_path(std::string_view path) {
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < path.size()) {
        while (i < path.size() && path[i] == '/') ++i;
        const auto j = path.find('/', i);
        const auto end = j == std::string_view::npos ? path.size() : j;
        if (end > i) out.emplace_back(path.substr(i, end - i));
        i = end;
    }
    return out;
}

std::map<std::string, std::string> parse_query(std::string_view q) {
    std::map<std::string, std::string> out;
    std::size_t i = 0;
    while (i < q.size()) {
        auto amp = q.find('&', i);
        if (amp == std::string_view::npos) amp = q.size();
        const auto kv = q.substr(i, amp - i);
        const auto eq = kv.find('=');
        if (eq == std::string_view::npos) {
            out[httplib::detail::decode_url(std::string(kv), true)] = "";
        } else {
            out[httplib::detail::decode_url(std::string(kv.substr(0, eq)), true)] =
                httplib::detail::decode_url(std::string(kv.substr(eq + 1)), true);
        }
        i = amp + 1;
    }
    return out;
}

std::uint64_t parse_u64(const std::string& s, std::string_view what) {
    std::uint64_t v = 0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size()) {
        throw Error(ErrorCode::InvalidArgument, std::string(what) + " must be a non-negative integer");
    }
    return v;
}

json parse_body(std::string_view body) {
    if (body.find_first_not_of(" \t\r\n") == std::string_view::npos) return json::object();
    try {
        auto j = json::parse(body);
        if (!j.is_object()) throw Error(ErrorCode::InvalidArgument, "request body must be a JSON object");
        return j;
    } catch (const json::exception& e) {
        throw Error(ErrorCode::InvalidArgument, std::string("malformed JSON: ") + e.what());
    }
}

std::vector<Resource> testbed_from(const json& ref) {
    if (ref.is_null()) return build_wwg();
    if (ref.is_object()) return parse_testbed(ref.dump());
    if (!ref.is_string()) throw Error(ErrorCode::ConfigError, "testbed must be a name, a path or an object");
    const auto name = ref.get<std::string>();
    if (name == "wwg") return build_wwg();
    std::ifstream in(name);
    if (!in) throw Error(ErrorCode::ConfigError, "unknown testbed '" + name + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_testbed(ss.str());
}

json accounts_json(const Accounts& a, const QoSConstraints& q) {
    json per = json::object();
    for (const auto& [r, l] : a.per_resource) {
        per[r] = json{{"jobs_done", l.jobs_done}, {"cpu_seconds", l.cpu_seconds}, {"cost", l.cost}};
    }
    json out{{"spent", a.spent}, {"committed", a.committed}, {"per_resource", per}};
    out["remaining"] = q.enforce_budget ? json(q.budget - a.spent - a.committed) : json(nullptr);
    return out;
}

json job_json(const Job& j) {
    json binding = json::object();
    for (const auto& [k, v] : j.binding) binding[k] = v;
    return json{{"id", j.id.value},
                {"state", std::string(to_string(j.state))},
                {"resource", j.assigned_resource ? json(*j.assigned_resource) : json(nullptr)},
                {"attempts", j.attempts.size()},
                {"command", j.command},
                {"binding", binding}};
}

}  // namespace

// ---------------------------------------------------------------------------

struct BrokerService::Session {
    std::string id;
    std::mutex m;
    std::unique_ptr<TeeJournal> sink;
    std::unique_ptr<Broker> broker;
    std::shared_ptr<EventStream::Feed> feed = std::make_shared<EventStream::Feed>();
    std::thread runner;
    std::condition_variable wake;
    bool stopping = false;
    bool anchored = false;
    std::chrono::steady_clock::time_point wall0;
    SimTime virtual0{0};
};

BrokerService::BrokerService(ServiceOptions options) : options_(std::move(options)) {}

BrokerService::~BrokerService() {
    shutdown();
    std::vector<std::shared_ptr<Session>> all;
    {
        std::lock_guard lock(mutex_);
        for (auto& [id, s] : sessions_) all.push_back(s);
    }
    for (auto& s : all) {
        {
            std::lock_guard lock(s->m);
            s->stopping = true;
        }
        s->wake.notify_all();
        if (s->runner.joinable()) s->runner.join();
        s->feed->end(kEndFrame);
    }
}

std::shared_ptr<BrokerService::Session> BrokerService::find(const std::string& id) {
    std::lock_guard lock(mutex_);
    auto it = sessions_.find(id);
    if (it == sessions_.end()) throw NotFound{"unknown experiment '" + id + "'"};
    return it->second;
}

void BrokerService::catch_up(Session& s) {
    if (options_.pace > 0 && s.anchored && !s.broker->finished()) {
        const auto wall = std::chrono::steady_clock::now() - s.wall0;
        const auto virt = std::chrono::duration_cast<SimTime>(
            std::chrono::duration<double, std::milli>(
                std::chrono::duration<double, std::milli>(wall).count() * options_.pace));
        s.broker->run_until(s.virtual0 + virt);
    }
    if (s.broker->finished()) s.feed->end(kEndFrame);
}

void BrokerService::start_runner(const std::shared_ptr<Session>& s) {
    if (options_.pace <= 0) return;
    s->runner = std::thread([this, s] {
        std::unique_lock lock(s->m);
        while (!s->stopping) {
            catch_up(*s);
            if (s->broker->finished()) break;
            s->wake.wait_for(lock, std::chrono::milliseconds(20));
        }
    });
}

HttpResponse BrokerService::create(std::string_view body) {
    const auto req = parse_body(body);
    RunConfig cfg;
    if (!req.contains("plan") || !req.at("plan").is_string()) {
        throw Error(ErrorCode::InvalidArgument, "'plan' (plan text) is required");
    }
    cfg.plan_text = req.at("plan").get<std::string>();
    (void)expand_jobs(parse_plan(cfg.plan_text));
    cfg.testbed = testbed_from(req.value("testbed", json(nullptr)));
    cfg.qos = qos_from_json(req.value("qos", json::object()));
    cfg.qos.validate();
    try {
        cfg.fabric.load.seed = req.value("seed", std::uint64_t{1});
        cfg.fabric.load.max_load = req.value("max_load", 0.25);
        cfg.nominal_job_seconds = req.value("job_seconds", 300.0);
        cfg.scheduler.default_job_seconds = cfg.nominal_job_seconds;
        cfg.consumer = req.value("consumer", std::string("default"));
    } catch (const json::exception& e) {
        throw Error(ErrorCode::InvalidArgument, e.what());
    }

    auto s = std::make_shared<Session>();
    {
        std::lock_guard lock(mutex_);
        if (req.contains("id") && req.at("id").is_string()) {
            s->id = req.at("id").get<std::string>();
            if (s->id.empty() || s->id.find('/') != std::string::npos) {
                throw Error(ErrorCode::InvalidArgument, "invalid experiment id");
            }
            if (sessions_.count(s->id)) throw Error(ErrorCode::IllegalTransition, "experiment id already in use");
        } else {
            do {
                s->id = "exp-" + std::to_string(next_id_++);
            } while (sessions_.count(s->id));
        }
    }
    cfg.experiment_id = s->id;

    std::unique_ptr<JournalSink> inner;
    if (options_.journal_dir.empty()) {
        inner = std::make_unique<MemoryJournal>();
    } else {
        fs::create_directories(options_.journal_dir);
        const auto path = fs::path(options_.journal_dir) / (s->id + ".jsonl");
        fs::remove(path);
        inner = std::make_unique<FileJournal>(path.string());
    }
    s->sink = std::make_unique<TeeJournal>(std::move(inner), s->feed);
    s->broker = std::make_unique<Broker>(cfg, *s->sink);
    {
        std::lock_guard lock(mutex_);
        sessions_[s->id] = s;
    }
    start_runner(s);
    return json_response(201, json{{"id", s->id}});
}

std::shared_ptr<EventStream> BrokerService::open_stream(const std::string& id, std::uint64_t from_seq) {
    auto s = find(id);
    auto stream = std::make_shared<EventStream>();
    stream->feed_ = s->feed;
    stream->next_seq_ = std::max<std::uint64_t>(1, from_seq);
    return stream;
}

void BrokerService::advance(const std::string& id, SimTime until) {
    auto s = find(id);
    std::lock_guard lock(s->m);
    s->broker->run_until(until);
    if (s->broker->finished()) s->feed->end(kEndFrame);
}

SimTime BrokerService::virtual_now(const std::string& id) {
    auto s = find(id);
    std::lock_guard lock(s->m);
    catch_up(*s);
    return s->broker->now();
}

HttpResponse BrokerService::handle(std::string_view method, std::string_view target, std::string_view body) {
    const auto qpos = target.find('?');
    const auto path = split_path(target.substr(0, qpos));
    const auto query = qpos == std::string_view::npos ? std::map<std::string, std::string>{}
                                                      : parse_query(target.substr(qpos + 1));
    try {
        if (path.empty() || path[0] != "experiments") throw NotFound{"no such endpoint"};
        if (path.size() == 1) {
            if (method == "POST") return create(body);
            if (method == "GET") {
                json ids = json::array();
                std::lock_guard lock(mutex_);
                for (const auto& [id, s] : sessions_) ids.push_back(id);
                return json_response(200, json{{"experiments", ids}});
            }
            return error_response(405, "MethodNotAllowed", "unsupported method");
        }

        auto s = find(path[1]);
        if (path.size() == 2 && method == "DELETE") {
            {
                std::lock_guard lock(mutex_);
                sessions_.erase(s->id);
            }
            {
                std::lock_guard lock(s->m);
                s->stopping = true;
            }
            s->wake.notify_all();
            if (s->runner.joinable()) s->runner.join();
            s->feed->end(kDeletedFrame);
            return json_response(200, json{{"id", s->id}, {"deleted", true}});
        }

        if (path.size() == 3 && path[2] == "events" && method == "GET") {
            const auto from = query.count("from") ? parse_u64(query.at("from"), "from") : 0;
            auto stream = open_stream(s->id, from);
            {
                std::lock_guard lock(s->m);
                catch_up(*s);
            }
            std::string out;
            while (auto f = stream->next_frame(std::chrono::milliseconds(0))) out += *f;
            return HttpResponse{200, "text/event-stream", out};
        }

        std::lock_guard lock(s->m);
        catch_up(*s);
        auto& b = *s->broker;
        const auto& exp = b.experiment();

        if (path.size() == 2 && method == "GET") {
            json counts = json::object();
            for (auto st : {JobState::Ready, JobState::Scheduled, JobState::Staged, JobState::Executing, JobState::Done,
                            JobState::Failed, JobState::Cancelled}) {
                counts[std::string(to_string(st))] = exp.count(st);
            }
            const auto summary = b.summary();
            return json_response(200, json{{"id", exp.id},
                                           {"phase", std::string(to_string(exp.phase))},
                                           {"now_min", to_minutes(b.now() - exp.clock_origin)},
                                           {"qos", qos_to_json(exp.qos)},
                                           {"accounts", accounts_json(exp.accounts, exp.qos)},
                                           {"jobs", json{{"total", exp.jobs.size()}, {"by_state", counts}}},
                                           {"makespan_min", summary.makespan_min},
                                           {"last_seq", b.engine().state().last_seq}});
        }
        if (path.size() != 3) throw NotFound{"no such endpoint"};
        const auto& action = path[2];

        if (method == "POST" && (action == "start" || action == "stop" || action == "pause" || action == "resume")) {
            if (action == "start") {
                const bool fresh = exp.phase == Phase::Created;
                b.start();
                if (fresh) {
                    s->anchored = true;
                    s->wall0 = std::chrono::steady_clock::now();
                    s->virtual0 = b.now();
                }
            } else if (action == "stop") {
                b.stop();
            } else if (action == "pause") {
                b.pause();
            } else {
                b.resume();
            }
            if (options_.pace <= 0 && action == "start") b.run_until(b.now());
            catch_up(*s);
            s->wake.notify_all();
            return json_response(200, json{{"id", exp.id}, {"phase", std::string(to_string(exp.phase))}});
        }
        if (method == "PATCH" && action == "qos") {
            const auto patch = parse_body(body);
            for (const auto& [k, v] : patch.items()) {
                if (k != "deadline" && k != "deadline_min" && k != "budget" && k != "strategy" &&
                    k != "enforce_deadline" && k != "enforce_budget") {
                    throw Error(ErrorCode::InvalidArgument, "unknown qos field '" + k + "'");
                }
            }
            const auto next = qos_from_json(patch, exp.qos);
            b.change_qos(next);
            catch_up(*s);
            return json_response(200, json{{"id", exp.id},
                                           {"qos", qos_to_json(exp.qos)},
                                           {"reschedule_requested", true},
                                           {"phase", std::string(to_string(exp.phase))}});
        }
        if (method == "GET" && action == "jobs") {
            JobFilter filter;
            if (query.count("state") && !query.at("state").empty()) {
                try {
                    filter.state = job_state_from_string(query.at("state"));
                } catch (const Error&) {
                    throw Error(ErrorCode::InvalidArgument, "unknown job state '" + query.at("state") + "'");
                }
            }
            if (query.count("resource")) filter.resource = query.at("resource");
            json jobs = json::array();
            for (const auto& j : b.engine().query_jobs(filter)) jobs.push_back(job_json(j));
            return json_response(200, json{{"jobs", jobs}});
        }
        if (method == "GET" && action == "timeseries") {
            auto interval = options_.sample_interval;
            if (query.count("interval")) {
                const auto secs = parse_u64(query.at("interval"), "interval");
                if (secs == 0) throw Error(ErrorCode::InvalidArgument, "interval must be positive");
                interval = seconds(static_cast<std::int64_t>(secs));
            }
            const auto records = parse_journal(feed_text(*s->feed));
            return HttpResponse{200, "text/csv", export_timeseries(records, interval)};
        }
        if (method == "GET" && action == "journal") {
            return HttpResponse{200, "application/x-ndjson", feed_text(*s->feed)};
        }
        if (method == "POST" && action == "failures") {
            const auto req = parse_body(body);
            try {
                const auto resource = req.at("resource").get<std::string>();
                const auto at = req.contains("at_min") ? from_seconds(req.at("at_min").get<double>() * 60.0) : b.now();
                const auto duration = from_seconds(req.at("duration_min").get<double>() * 60.0);
                b.inject_failure(resource, at, duration);
            } catch (const json::exception& e) {
                throw Error(ErrorCode::InvalidArgument, e.what());
            }
            return json_response(200, json{{"id", exp.id}});
        }
        throw NotFound{"no such endpoint"};
    } catch (const NotFound& e) {
        return error_response(404, "NotFound", e.what);
    } catch (const PlanError& e) {
        return error_response(422, to_string(e.code()), e.what(), json{{"line", e.line()}, {"column", e.column()}});
    } catch (const Error& e) {
        return error_response(status_for(e.code()), to_string(e.code()), e.what());
    } catch (const std::exception& e) {
        return error_response(500, "Internal", e.what());
    }
}

void BrokerService::mount(httplib::Server& server) {
    server.Get(R"(/experiments/([^/]+)/events)", [this](const httplib::Request& req, httplib::Response& res) {
        std::shared_ptr<EventStream> stream;
        try {
            const auto from = req.has_param("from") ? parse_u64(req.get_param_value("from"), "from") : 0;
            stream = open_stream(req.matches[1].str(), from);
        } catch (const NotFound& e) {
            res.status = 404;
            res.set_content(json{{"error", "NotFound"}, {"message", e.what}}.dump(), "application/json");
            return;
        } catch (const Error& e) {
            res.status = status_for(e.code());
            res.set_content(json{{"error", to_string(e.code())}, {"message", e.what()}}.dump(), "application/json");
            return;
        }
        res.set_header("Cache-Control", "no-cache");
        res.set_chunked_content_provider("text/event-stream", [stream](std::size_t, httplib::DataSink& sink) {
            if (auto frame = stream->next_frame(std::chrono::milliseconds(250))) {
                if (!sink.write(frame->data(), frame->size())) return false;
            }
            if (stream->closed()) sink.done();
            return sink.is_writable();
        });
    });
    const auto route = [this](const httplib::Request& req, httplib::Response& res) {
        std::string target = req.path;
        if (!req.params.empty()) {
            target += '?';
            bool first = true;
            for (const auto& [k, v] : req.params) {
                if (!first) target += '&';
                first = false;
                target += httplib::detail::encode_query_param(k) + "=" + httplib::detail::encode_query_param(v);
            }
        }
        const auto out = handle(req.method, target, req.body);
        res.status = out.status;
        res.set_content(out.body, out.content_type);
    };
    server.Get(".*", route);
    server.Post(".*", route);
    server.Patch(".*", route);
    server.Delete(".*", route);
}

bool BrokerService::listen(const std::string& host, int port) {
    server_ = std::make_unique<httplib::Server>();
    mount(*server_);
    return server_->listen(host, port);
}

void BrokerService::shutdown() {
    if (server_) server_->stop();
}

}  // namespace gridbroker
