#pragma once

#include <string_view>
#include <variant>

#include "gridbroker/resource.hpp"

namespace gridbroker {

inline constexpr SimTime kDefaultQuoteTtl = seconds(300);

struct PriceQuote {
    ResourceId resource;
    GridDollars price = 0;  // G$ per CPU-second
    SimTime valid_from{0};
    SimTime valid_until{0};
    PriceModel model = PriceModel::CommodityMarket;
};

struct Contract {
    ResourceId resource;
    GridDollars price = 0;
    SimTime established_at{0};
};

struct ContractRequest {
    ResourceId resource;
    GridDollars max_price = 0;
};

enum class RejectionReason { TooExpensive, QuoteExpired };

struct Rejection {
    RejectionReason reason;
};

/// Price the owner charges `consumer` at `now`, rounded half-up to whole G$.
GridDollars quoted_price(const PricePolicy& policy, std::string_view consumer, SimTime now);

/// Commodity-market / posted-price quote. Throws ResourceUnavailable when
/// `available` is false.
PriceQuote quote(const Resource& resource, std::string_view consumer, SimTime now, bool available,
                 SimTime ttl = kDefaultQuoteTtl);

std::variant<Contract, Rejection> negotiate(const ContractRequest& request, const PriceQuote& quote, SimTime now);

}  // namespace gridbroker
