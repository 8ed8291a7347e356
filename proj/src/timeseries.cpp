#include "gridbroker/timeseries.hpp"

#include <algorithm>

#include "gridbroker/engine.hpp"

namespace gridbroker {

namespace {

void emit(const EngineState& s, SimTime at, std::vector<TimeSeriesPoint>& out) {
    const auto& exp = s.experiment;
    for (const auto& r : s.config.testbed) {
        TimeSeriesPoint p;
        p.t_minutes = to_minutes(at - exp.clock_origin);
        p.resource = r.id;
        for (const auto& j : exp.jobs) {
            if (j.state == JobState::Executing && j.assigned_resource == r.id) ++p.jobs_executing;
        }
        if (auto it = exp.accounts.per_resource.find(r.id); it != exp.accounts.per_resource.end()) {
            p.cumulative_done = it->second.jobs_done;
            p.spent = it->second.cost;
        }
        out.push_back(std::move(p));
    }
}

}  // namespace

std::vector<TimeSeriesPoint> sample_timeseries(std::span<const JournalRecord> records, SimTime interval) {
    if (interval <= SimTime{0}) throw Error(ErrorCode::InvalidArgument, "sample interval must be positive");
    const bool marked = std::any_of(records.begin(), records.end(),
                                    [](const JournalRecord& r) { return r.kind == RecordKind::QuantumMark; });
    if (!marked) throw Error(ErrorCode::NoData, "experiment has no quantum marks yet");

    // Validate and find the time span first.
    const auto final_state = replay(records);
    const auto origin = final_state.experiment.clock_origin;
    const auto span = final_state.last_t - origin;
    const auto count = std::max<std::int64_t>(1, (span + interval - SimTime{1}) / interval);

    std::vector<TimeSeriesPoint> out;
    EngineState s;
    std::size_t next = 0;
    for (std::int64_t k = 1; k <= count; ++k) {
        const auto at = origin + interval * k;
        while (next < records.size() && records[next].t <= at) apply(s, records[next++]);
        emit(s, at, out);
    }
    return out;
}

std::string timeseries_csv(const std::vector<TimeSeriesPoint>& points) {
    std::string out = "t_min,resource,executing,done_cum,spent\n";
    for (const auto& p : points) {
        out += format_number(p.t_minutes);
        out += ',' + p.resource + ',' + std::to_string(p.jobs_executing) + ',' + std::to_string(p.cumulative_done) +
               ',' + std::to_string(p.spent) + '\n';
    }
    return out;
}

}  // namespace gridbroker
