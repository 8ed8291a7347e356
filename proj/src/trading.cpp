#include "gridbroker/trading.hpp"

#include <algorithm>
#include <cmath>

namespace gridbroker {

namespace {
constexpr SimTime kDay = std::chrono::hours(24);
}

bool DailyWindow::contains(SimTime now) const {
    const SimTime tod = SimTime{((now.count() % kDay.count()) + kDay.count()) % kDay.count()};
    if (from <= until) return tod >= from && tod < until;
    return tod >= from || tod < until;
}

std::uint32_t Resource::offered_nodes(SimTime t) const {
    double fraction = 1.0;
    for (const auto& w : availability) {
        if (t >= w.from && t < w.until) fraction = std::min(fraction, w.fraction);
    }
    const auto n = static_cast<std::uint32_t>(std::floor(fraction * node_count + 1e-9));
    return std::min(n, node_count);
}

GridDollars quoted_price(const PricePolicy& policy, std::string_view consumer, SimTime now) {
    if (policy.model == PriceModel::PostedPrice) return policy.base_price;
    double factor = 1.0;
    if (policy.peak_window && policy.peak_window->contains(now)) factor *= policy.peak_multiplier;
    if (auto it = policy.consumer_overrides.find(std::string(consumer)); it != policy.consumer_overrides.end()) {
        factor *= it->second;
    }
    return round_half_up(static_cast<double>(policy.base_price) * factor);
}

PriceQuote quote(const Resource& resource, std::string_view consumer, SimTime now, bool available, SimTime ttl) {
    if (!available) throw Error(ErrorCode::ResourceUnavailable, "resource " + resource.id + " is unavailable");
    return PriceQuote{resource.id, quoted_price(resource.price, consumer, now), now, now + ttl, resource.price.model};
}

std::variant<Contract, Rejection> negotiate(const ContractRequest& request, const PriceQuote& q, SimTime now) {
    if (now < q.valid_from || now > q.valid_until) return Rejection{RejectionReason::QuoteExpired};
    if (q.price > request.max_price) return Rejection{RejectionReason::TooExpensive};
    return Contract{q.resource, q.price, now};
}

}  // namespace gridbroker
