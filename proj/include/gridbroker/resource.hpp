#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "gridbroker/types.hpp"

namespace gridbroker {

enum class PriceModel { CommodityMarket, PostedPrice };

/// A recurring interval of the virtual day. `from > until` wraps midnight.
struct DailyWindow {
    SimTime from{0};
    SimTime until{0};

    bool contains(SimTime now) const;
};

struct PricePolicy {
    PriceModel model = PriceModel::CommodityMarket;
    GridDollars base_price = 1;  // G$ per CPU-second
    double peak_multiplier = 1.0;
    std::optional<DailyWindow> peak_window;
    std::map<std::string, double> consumer_overrides;
};

/// Fraction of the resource's nodes offered to the broker during [from, until).
struct AvailabilityWindow {
    SimTime from{0};
    SimTime until{0};
    double fraction = 1.0;
};

/// The whole resource is unreachable during [at, at + duration).
struct FailureWindow {
    SimTime at{0};
    SimTime duration{0};
};

struct Resource {
    ResourceId id;
    std::string organization;
    std::string kind;
    std::uint32_t node_count = 1;
    double speed_factor = 1.0;  // nominal seconds are divided by this
    PricePolicy price;
    std::vector<AvailabilityWindow> availability;
    std::vector<FailureWindow> failures;

    /// Nodes the owner offers at `t` according to the availability trace;
    /// failures are tracked by the fabric, not here.
    std::uint32_t offered_nodes(SimTime t) const;
};

}  // namespace gridbroker
