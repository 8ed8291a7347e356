#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <queue>
#include <string>
#include <string_view>
#include <vector>

#include "gridbroker/resource.hpp"
#include "gridbroker/types.hpp"

namespace gridbroker {

// ---------------------------------------------------------------------------
// Portable randomness. SplitMix64 (Steele, Lea & Flood) is used as a keyed
// hash so that every draw is a pure function of its key and identical on
// every platform.
// ---------------------------------------------------------------------------

std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t fnv1a64(std::string_view s);

/// Uniform double in [0, 1) from the top 53 bits of a hash.
double unit_interval(std::uint64_t h);

struct LoadModel {
    std::uint64_t seed = 0;  // 0 disables background load
    double max_load = 0.25;

    /// Background load in [0, max_load) for a (resource, job) pair.
    double background_load(std::string_view resource, JobId job) const;
};

/// Seconds a job occupies a node: nominal / speed * (1 + background load).
double service_time(double nominal_cpu_seconds, const Resource& resource, JobId job, const LoadModel& load);

// ---------------------------------------------------------------------------
// Event loop
// ---------------------------------------------------------------------------

enum class SimEventKind { AgentDone, QuantumTick, ResourceDown, ResourceUp, ClientCommand };

std::string_view to_string(SimEventKind k);

struct SimEvent {
    SimTime instant{0};
    std::uint64_t ordinal = 0;
    SimEventKind kind = SimEventKind::QuantumTick;
    std::function<void()> handler;
};

/// Deterministic discrete-event loop: events run in (instant, ordinal)
/// order and ordinals follow insertion order.
class EventLoop {
public:
    SimTime now() const { return now_; }
    bool empty() const { return queue_.empty(); }
    std::size_t size() const { return queue_.size(); }
    std::optional<SimTime> next_instant() const;

    /// Throws PastInstant when `at` precedes the clock.
    std::uint64_t schedule(SimTime at, SimEventKind kind, std::function<void()> handler);

    /// Pop the least event, move the clock to it and run its handler.
    /// Returns the executed event (handler already consumed). Throws EmptyQueue.
    SimEvent advance();

    /// Move the clock forward without running anything (used after recovery).
    void set_clock(SimTime t);

private:
    struct Later {
        bool operator()(const SimEvent& a, const SimEvent& b) const {
            return a.instant != b.instant ? a.instant > b.instant : a.ordinal > b.ordinal;
        }
    };

    SimTime now_{0};
    std::uint64_t next_ordinal_ = 0;
    std::priority_queue<SimEvent, std::vector<SimEvent>, Later> queue_;
};

// ---------------------------------------------------------------------------
// Grid fabric
// ---------------------------------------------------------------------------

struct FabricConfig {
    LoadModel load;
    SimTime stage_delay = seconds(5);
    double task_error_probability = 0.0;
};

class Fabric {
public:
    Fabric(std::vector<Resource> registry, FabricConfig config);

    const std::vector<Resource>& registry() const { return registry_; }
    const Resource& resource(std::string_view id) const;
    bool has_resource(std::string_view id) const;
    const FabricConfig& config() const { return config_; }

    EventLoop& loop() { return loop_; }
    const EventLoop& loop() const { return loop_; }
    SimTime now() const { return loop_.now(); }

    bool is_down(std::string_view id) const;
    /// Up and offering at least one node.
    bool available(std::string_view id) const;
    std::uint32_t offered_nodes(std::string_view id) const;
    std::vector<std::uint32_t> free_nodes(std::string_view id) const;
    std::optional<JobId> occupant(std::string_view id, std::uint32_t node) const;
    std::uint32_t busy_nodes(std::string_view id) const;
    std::uint32_t busy_nodes() const;

    void occupy(std::string_view id, std::uint32_t node, JobId job);
    void release(std::string_view id, std::uint32_t node);

    /// Deterministic task-error draw for a job attempt.
    bool task_error(JobId job, std::size_t attempt) const;

    /// Schedules ResourceDown at `at` and ResourceUp at `at + duration`.
    /// The callbacks run after the availability flag changes.
    void inject_failure(const ResourceId& id, SimTime at, SimTime duration);

    void on_resource_down(std::function<void(const ResourceId&)> cb) { on_down_ = std::move(cb); }
    void on_resource_up(std::function<void(const ResourceId&)> cb) { on_up_ = std::move(cb); }

private:
    struct NodeSet {
        std::vector<std::optional<JobId>> occupant;
        int down_depth = 0;
    };

    std::size_t index_of(std::string_view id) const;

    std::vector<Resource> registry_;
    std::vector<NodeSet> nodes_;
    FabricConfig config_;
    EventLoop loop_;
    std::function<void(const ResourceId&)> on_down_;
    std::function<void(const ResourceId&)> on_up_;
};

// ---------------------------------------------------------------------------
// Testbed configuration (JSON text)
// ---------------------------------------------------------------------------

/// Parse a testbed document. Throws ConfigError.
std::vector<Resource> parse_testbed(std::string_view text);
std::vector<Resource> load_testbed(const std::string& path);
std::string testbed_to_json(const std::vector<Resource>& registry);

/// The six-resource World Wide Grid subset with its published prices.
std::string wwg_testbed_text();
std::vector<Resource> build_wwg(std::string_view config_text);
inline std::vector<Resource> build_wwg() { return build_wwg(wwg_testbed_text()); }

}  // namespace gridbroker
