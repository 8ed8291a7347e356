#pragma once

#include <span>
#include <string>
#include <vector>

#include "gridbroker/journal.hpp"
#include "gridbroker/types.hpp"

namespace gridbroker {

struct TimeSeriesPoint {
    double t_minutes = 0;
    ResourceId resource;
    std::int64_t jobs_executing = 0;
    std::int64_t cumulative_done = 0;
    GridDollars spent = 0;

    friend bool operator==(const TimeSeriesPoint&, const TimeSeriesPoint&) = default;
};

inline constexpr SimTime kDefaultSampleInterval = seconds(60);

/// Engine state sampled at interval, 2*interval, ... up to the first
/// instant at or after the last record; one point per testbed resource at
/// each instant. Throws NoData without a QuantumMark.
std::vector<TimeSeriesPoint> sample_timeseries(std::span<const JournalRecord> records,
                                               SimTime interval = kDefaultSampleInterval);

std::string timeseries_csv(const std::vector<TimeSeriesPoint>& points);

inline std::string export_timeseries(std::span<const JournalRecord> records,
                                     SimTime interval = kDefaultSampleInterval) {
    return timeseries_csv(sample_timeseries(records, interval));
}

}  // namespace gridbroker
