#include "gridbroker/fabric.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace gridbroker {

using nlohmann::json;

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

double unit_interval(std::uint64_t h) { return static_cast<double>(h >> 11) * 0x1.0p-53; }

double LoadModel::background_load(std::string_view resource, JobId job) const {
    if (seed == 0 || max_load <= 0) return 0.0;
    const std::uint64_t key = splitmix64(splitmix64(seed) ^ fnv1a64(resource)) ^ job.value;
    return unit_interval(splitmix64(key)) * max_load;
}

double service_time(double nominal_cpu_seconds, const Resource& resource, JobId job, const LoadModel& load) {
    return nominal_cpu_seconds / resource.speed_factor * (1.0 + load.background_load(resource.id, job));
}

std::string_view to_string(SimEventKind k) {
    switch (k) {
        case SimEventKind::AgentDone: return "AgentDone";
        case SimEventKind::QuantumTick: return "QuantumTick";
        case SimEventKind::ResourceDown: return "ResourceDown";
        case SimEventKind::ResourceUp: return "ResourceUp";
        case SimEventKind::ClientCommand: return "ClientCommand";
    }
    return "?";
}

std::optional<SimTime> EventLoop::next_instant() const {
    if (queue_.empty()) return std::nullopt;
    return queue_.top().instant;
}

std::uint64_t EventLoop::schedule(SimTime at, SimEventKind kind, std::function<void()> handler) {
    if (at < now_) {
        throw Error(ErrorCode::PastInstant, "event at " + std::to_string(at.count()) + " ms precedes clock " +
                                                std::to_string(now_.count()) + " ms");
    }
    const auto ordinal = next_ordinal_++;
    queue_.push(SimEvent{at, ordinal, kind, std::move(handler)});
    return ordinal;
}

SimEvent EventLoop::advance() {
    if (queue_.empty()) throw Error(ErrorCode::EmptyQueue, "simulation has no pending events");
    SimEvent ev = queue_.top();
    queue_.pop();
    now_ = ev.instant;
    if (ev.handler) {
        auto handler = std::move(ev.handler);
        ev.handler = nullptr;
        handler();
    }
    return ev;
}

void EventLoop::set_clock(SimTime t) {
    if (t < now_) throw Error(ErrorCode::PastInstant, "clock cannot move backwards");
    now_ = t;
}

Fabric::Fabric(std::vector<Resource> registry, FabricConfig config)
    : registry_(std::move(registry)), config_(std::move(config)) {
    nodes_.reserve(registry_.size());
    for (const auto& r : registry_) nodes_.push_back(NodeSet{std::vector<std::optional<JobId>>(r.node_count), 0});
}

std::size_t Fabric::index_of(std::string_view id) const {
    for (std::size_t i = 0; i < registry_.size(); ++i) {
        if (registry_[i].id == id) return i;
    }
    throw Error(ErrorCode::ConfigError, "unknown resource '" + std::string(id) + "'");
}

const Resource& Fabric::resource(std::string_view id) const { return registry_[index_of(id)]; }

bool Fabric::has_resource(std::string_view id) const {
    return std::any_of(registry_.begin(), registry_.end(), [&](const Resource& r) { return r.id == id; });
}

bool Fabric::is_down(std::string_view id) const { return nodes_[index_of(id)].down_depth > 0; }

std::uint32_t Fabric::offered_nodes(std::string_view id) const {
    const auto i = index_of(id);
    if (nodes_[i].down_depth > 0) return 0;
    return registry_[i].offered_nodes(now());
}

bool Fabric::available(std::string_view id) const { return offered_nodes(id) > 0; }

std::vector<std::uint32_t> Fabric::free_nodes(std::string_view id) const {
    const auto i = index_of(id);
    const auto offered = offered_nodes(id);
    // Busy nodes count against the offer even if they sit above it.
    const auto busy = busy_nodes(id);
    std::vector<std::uint32_t> out;
    if (offered <= busy) return out;
    const std::uint32_t want = offered - busy;
    for (std::uint32_t n = 0; n < nodes_[i].occupant.size() && out.size() < want; ++n) {
        if (!nodes_[i].occupant[n]) out.push_back(n);
    }
    return out;
}

std::optional<JobId> Fabric::occupant(std::string_view id, std::uint32_t node) const {
    return nodes_[index_of(id)].occupant.at(node);
}

std::uint32_t Fabric::busy_nodes(std::string_view id) const {
    const auto& occ = nodes_[index_of(id)].occupant;
    return static_cast<std::uint32_t>(std::count_if(occ.begin(), occ.end(), [](const auto& o) { return o.has_value(); }));
}

std::uint32_t Fabric::busy_nodes() const {
    std::uint32_t n = 0;
    for (const auto& r : registry_) n += busy_nodes(r.id);
    return n;
}

void Fabric::occupy(std::string_view id, std::uint32_t node, JobId job) {
    auto& slot = nodes_[index_of(id)].occupant.at(node);
    if (slot) {
        throw Error(ErrorCode::InvalidArgument, std::string(id) + " node " + std::to_string(node) + " is busy");
    }
    slot = job;
}

void Fabric::release(std::string_view id, std::uint32_t node) { nodes_[index_of(id)].occupant.at(node).reset(); }

bool Fabric::task_error(JobId job, std::size_t attempt) const {
    if (config_.task_error_probability <= 0) return false;
    const std::uint64_t key = splitmix64(splitmix64(config_.load.seed ^ 0x7a5cULL) ^ job.value) ^ attempt;
    return unit_interval(splitmix64(key)) < config_.task_error_probability;
}

void Fabric::inject_failure(const ResourceId& id, SimTime at, SimTime duration) {
    const auto i = index_of(id);
    if (at < now()) throw Error(ErrorCode::PastInstant, "failure of " + id + " scheduled in the past");
    if (duration <= SimTime{0}) throw Error(ErrorCode::InvalidArgument, "failure duration must be positive");
    loop_.schedule(at, SimEventKind::ResourceDown, [this, i, id] {
        ++nodes_[i].down_depth;
        if (on_down_) on_down_(id);
    });
    loop_.schedule(at + duration, SimEventKind::ResourceUp, [this, i, id] {
        --nodes_[i].down_depth;
        if (on_up_) on_up_(id);
    });
}

// ---------------------------------------------------------------------------
// Testbed files
// ---------------------------------------------------------------------------

namespace {

[[noreturn]] void config_error(const std::string& what) { throw Error(ErrorCode::ConfigError, what); }

SimTime minutes_field(const json& j, const char* key) {
    if (!j.contains(key) || !j[key].is_number()) config_error(std::string("missing numeric '") + key + "'");
    return from_seconds(j[key].get<double>() * 60.0);
}

Resource parse_resource(const json& j) {
    if (!j.is_object()) config_error("resource entries must be objects");
    Resource r;
    if (!j.contains("id") || !j["id"].is_string() || j["id"].get<std::string>().empty()) {
        config_error("resource without an id");
    }
    r.id = j["id"].get<std::string>();
    r.organization = j.value("organization", "");
    r.kind = j.value("kind", "");
    if (!j.contains("nodes") || !j["nodes"].is_number_integer() || j["nodes"].get<long long>() <= 0) {
        config_error(r.id + ": 'nodes' must be a positive integer");
    }
    r.node_count = j["nodes"].get<std::uint32_t>();
    r.speed_factor = j.value("speed", 1.0);
    if (!(r.speed_factor > 0)) config_error(r.id + ": 'speed' must be positive");

    if (!j.contains("price") || !j["price"].is_object()) config_error(r.id + ": missing 'price'");
    const auto& p = j["price"];
    const auto model = p.value("model", std::string("commodity"));
    if (model == "commodity") {
        r.price.model = PriceModel::CommodityMarket;
    } else if (model == "posted") {
        r.price.model = PriceModel::PostedPrice;
    } else {
        config_error(r.id + ": unknown price model '" + model + "'");
    }
    if (!p.contains("base") || !p["base"].is_number_integer() || p["base"].get<long long>() <= 0) {
        config_error(r.id + ": price 'base' must be a positive integer");
    }
    r.price.base_price = p["base"].get<GridDollars>();
    r.price.peak_multiplier = p.value("peak_multiplier", 1.0);
    if (r.price.peak_multiplier < 1.0) config_error(r.id + ": peak_multiplier must be >= 1");
    if (p.contains("peak_hours")) {
        const auto& w = p["peak_hours"];
        if (!w.is_array() || w.size() != 2) config_error(r.id + ": peak_hours must be [from, until]");
        r.price.peak_window = DailyWindow{from_seconds(w[0].get<double>() * 3600.0), from_seconds(w[1].get<double>() * 3600.0)};
    }
    if (p.contains("consumer_factors")) {
        for (const auto& [consumer, factor] : p["consumer_factors"].items()) {
            if (!factor.is_number() || factor.get<double>() <= 0) config_error(r.id + ": bad consumer factor");
            r.price.consumer_overrides[consumer] = factor.get<double>();
        }
    }
    if (r.price.model == PriceModel::PostedPrice) {
        r.price.peak_multiplier = 1.0;
        r.price.peak_window.reset();
        r.price.consumer_overrides.clear();
    }

    for (const auto& a : j.value("availability", json::array())) {
        AvailabilityWindow w{minutes_field(a, "from_min"), minutes_field(a, "until_min"), a.value("fraction", 1.0)};
        if (w.fraction < 0 || w.fraction > 1 || w.until <= w.from) config_error(r.id + ": bad availability window");
        r.availability.push_back(w);
    }
    for (const auto& f : j.value("failures", json::array())) {
        FailureWindow w{minutes_field(f, "at_min"), minutes_field(f, "duration_min")};
        if (w.duration <= SimTime{0} || w.at < SimTime{0}) config_error(r.id + ": bad failure window");
        r.failures.push_back(w);
    }
    return r;
}

json minutes_json(SimTime t) { return to_minutes(t); }

}  // namespace

std::vector<Resource> parse_testbed(std::string_view text) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::exception& e) {
        config_error(std::string("testbed is not valid JSON: ") + e.what());
    }
    if (!doc.is_object() || !doc.contains("resources") || !doc["resources"].is_array()) {
        config_error("testbed needs a 'resources' array");
    }
    std::vector<Resource> out;
    try {
        for (const auto& r : doc["resources"]) out.push_back(parse_resource(r));
    } catch (const json::exception& e) {
        config_error(std::string("testbed field has the wrong type: ") + e.what());
    }
    if (out.empty()) config_error("testbed lists no resources");
    for (std::size_t i = 0; i < out.size(); ++i) {
        for (std::size_t k = i + 1; k < out.size(); ++k) {
            if (out[i].id == out[k].id) config_error("duplicate resource id '" + out[i].id + "'");
        }
    }
    return out;
}

std::vector<Resource> load_testbed(const std::string& path) {
    std::ifstream in(path);
    if (!in) config_error("cannot read testbed '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_testbed(ss.str());
}

std::string testbed_to_json(const std::vector<Resource>& registry) {
    json doc;
    doc["resources"] = json::array();
    for (const auto& r : registry) {
        json p;
        p["model"] = r.price.model == PriceModel::CommodityMarket ? "commodity" : "posted";
        p["base"] = r.price.base_price;
        if (r.price.peak_multiplier != 1.0) p["peak_multiplier"] = r.price.peak_multiplier;
        if (r.price.peak_window) {
            p["peak_hours"] = {to_seconds(r.price.peak_window->from) / 3600.0, to_seconds(r.price.peak_window->until) / 3600.0};
        }
        if (!r.price.consumer_overrides.empty()) p["consumer_factors"] = r.price.consumer_overrides;
        json jr{{"id", r.id}, {"organization", r.organization}, {"kind", r.kind}, {"nodes", r.node_count},
                {"speed", r.speed_factor}, {"price", p}};
        if (!r.availability.empty()) {
            jr["availability"] = json::array();
            for (const auto& w : r.availability) {
                jr["availability"].push_back(
                    {{"from_min", minutes_json(w.from)}, {"until_min", minutes_json(w.until)}, {"fraction", w.fraction}});
            }
        }
        if (!r.failures.empty()) {
            jr["failures"] = json::array();
            for (const auto& f : r.failures) {
                jr["failures"].push_back({{"at_min", minutes_json(f.at)}, {"duration_min", minutes_json(f.duration)}});
            }
        }
        doc["resources"].push_back(std::move(jr));
    }
    return doc.dump(2) + "\n";
}

std::string wwg_testbed_text() {
    return R"wwg({
  "resources": [
    {"id": "monash-linux", "organization": "Monash, Australia", "kind": "Linux cluster",
     "nodes": 60, "speed": 1.0, "price": {"model": "commodity", "base": 2}},
    {"id": "titech-solaris", "organization": "Tokyo Institute of Technology, Japan", "kind": "Solaris (Ultra-2)",
     "nodes": 1, "speed": 1.0, "price": {"model": "commodity", "base": 3}},
    {"id": "cnuce-prosecco", "organization": "CNUCE, Pisa, Italy", "kind": "Linux PC (Prosecco)",
     "nodes": 1, "speed": 1.0, "price": {"model": "commodity", "base": 3}},
    {"id": "cnuce-barbera", "organization": "CNUCE, Pisa, Italy", "kind": "Linux PC (Barbera)",
     "nodes": 1, "speed": 1.0, "price": {"model": "commodity", "base": 4}},
    {"id": "anl-sun", "organization": "ANL, Chicago, USA", "kind": "Sun (8 nodes)",
     "nodes": 8, "speed": 1.0, "price": {"model": "commodity", "base": 7}},
    {"id": "isi-sgi", "organization": "ISI, Los Angeles, USA", "kind": "SGI (10 nodes)",
     "nodes": 10, "speed": 1.0, "price": {"model": "commodity", "base": 8}}
  ]
}
)wwg";
}

std::vector<Resource> build_wwg(std::string_view config_text) {
    if (config_text.find_first_not_of(" \t\r\n") == std::string_view::npos) config_error("empty testbed config");
    return parse_testbed(config_text);
}

}  // namespace gridbroker
