#pragma once

#include <chrono>
#include <condition_variable>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "gridbroker/broker.hpp"

namespace httplib {
class Server;
}

namespace gridbroker {

struct ServiceOptions {
    /// Virtual seconds per wall second. Zero or less: experiments only
    /// advance through `BrokerService::advance`.
    double pace = 60.0;
    /// Journals are written here as <id>.jsonl; empty keeps them in memory.
    std::string journal_dir;
    SimTime sample_interval = seconds(60);
};

struct HttpResponse {
    int status = 200;
    std::string content_type = "application/json";
    std::string body;
};

/// Ordered feed of one experiment's journal, starting at a given seq.
/// Frames use server-sent-event framing.
class EventStream {
public:
    /// Next frame, or nullopt on timeout. After the end frame (experiment
    /// finished or deleted) `closed()` is true.
    std::optional<std::string> next_frame(std::chrono::milliseconds timeout);
    bool closed() const { return closed_; }

    struct Feed;

private:
    friend class BrokerService;
    std::shared_ptr<Feed> feed_;
    std::uint64_t next_seq_ = 0;
    bool closed_ = false;
};

class BrokerService {
public:
    explicit BrokerService(ServiceOptions options = {});
    ~BrokerService();

    BrokerService(const BrokerService&) = delete;
    BrokerService& operator=(const BrokerService&) = delete;

    /// Route one request. `target` may carry a query string.
    HttpResponse handle(std::string_view method, std::string_view target, std::string_view body);

    /// Throws Error(UnknownJob) for an unknown id.
    std::shared_ptr<EventStream> open_stream(const std::string& id, std::uint64_t from_seq);

    /// Move an experiment's virtual clock forward (manual pacing).
    void advance(const std::string& id, SimTime until);
    /// Current virtual time of an experiment.
    SimTime virtual_now(const std::string& id);

    void mount(httplib::Server& server);
    /// Blocks until `shutdown`.
    bool listen(const std::string& host, int port);
    void shutdown();

private:
    struct Session;

    std::shared_ptr<Session> find(const std::string& id);
    HttpResponse create(std::string_view body);
    void start_runner(const std::shared_ptr<Session>& s);
    void catch_up(Session& s);

    ServiceOptions options_;
    std::mutex mutex_;
    std::map<std::string, std::shared_ptr<Session>> sessions_;
    std::uint64_t next_id_ = 1;
    std::unique_ptr<httplib::Server> server_;
};

}  // namespace gridbroker
