#include "gridbroker/journal.hpp"

#include <array>
#include <sstream>
#include <utility>

#include <fcntl.h>
#include <unistd.h>

namespace gridbroker {

using nlohmann::json;

namespace {

constexpr std::array<std::pair<RecordKind, std::string_view>, 9> kKinds{{
    {RecordKind::ExperimentCreated, "ExperimentCreated"},
    {RecordKind::QoSChanged, "QoSChanged"},
    {RecordKind::JobTransition, "JobTransition"},
    {RecordKind::AttemptClosed, "AttemptClosed"},
    {RecordKind::QuantumMark, "QuantumMark"},
    {RecordKind::AllocationDelta, "AllocationDelta"},
    {RecordKind::PhaseChanged, "PhaseChanged"},
    {RecordKind::JobsAdded, "JobsAdded"},
    {RecordKind::FailureInjected, "FailureInjected"},
}};

}  // namespace

std::string_view to_string(RecordKind k) {
    for (const auto& [kind, name] : kKinds) {
        if (kind == k) return name;
    }
    return "?";
}

RecordKind record_kind_from_string(std::string_view s) {
    for (const auto& [kind, name] : kKinds) {
        if (name == s) return kind;
    }
    throw Error(ErrorCode::CorruptJournal, "unknown record kind '" + std::string(s) + "'");
}

json JournalRecord::to_json() const {
    json j;
    j["seq"] = seq;
    j["t"] = to_seconds(t);
    j["kind"] = std::string(to_string(kind));
    j["payload"] = payload;
    return j;
}

JournalRecord JournalRecord::from_json(const json& j) {
    JournalRecord r;
    r.seq = j.at("seq").get<std::uint64_t>();
    r.t = from_seconds(j.at("t").get<double>());
    r.kind = record_kind_from_string(j.at("kind").get<std::string>());
    r.payload = j.at("payload");
    return r;
}

std::string JournalRecord::to_line() const { return to_json().dump(); }

void MemoryJournal::append(const JournalRecord& record) {
    if (failing_) throw Error(ErrorCode::StorageFailure, "journal storage unavailable");
    records_.push_back(record);
}

FileJournal::FileJournal(std::string path, bool sync) : path_(std::move(path)), sync_(sync) {
    out_.open(path_, std::ios::out | std::ios::app);
    if (!out_) throw Error(ErrorCode::StorageFailure, "cannot open journal '" + path_ + "'");
}

void FileJournal::append(const JournalRecord& record) {
    out_ << record.to_line() << '\n';
    out_.flush();
    if (!out_) throw Error(ErrorCode::StorageFailure, "write to '" + path_ + "' failed");
    if (sync_) {
        const int fd = ::open(path_.c_str(), O_WRONLY);
        if (fd < 0 || ::fsync(fd) != 0) {
            if (fd >= 0) ::close(fd);
            throw Error(ErrorCode::StorageFailure, "fsync of '" + path_ + "' failed");
        }
        ::close(fd);
    }
}

std::vector<JournalRecord> parse_journal(std::string_view text) {
    std::vector<JournalRecord> out;
    std::size_t pos = 0;
    while (pos < text.size()) {
        auto nl = text.find('\n', pos);
        if (nl == std::string_view::npos) nl = text.size();
        const auto line = text.substr(pos, nl - pos);
        pos = nl + 1;
        if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
        const std::uint64_t last_good = out.empty() ? 0 : out.back().seq;
        JournalRecord r;
        try {
            r = JournalRecord::from_json(json::parse(line));
        } catch (const std::exception& e) {
            throw Error(ErrorCode::CorruptJournal,
                        "unparseable record after seq " + std::to_string(last_good) + ": " + e.what());
        }
        if (r.seq != last_good + 1) {
            throw Error(ErrorCode::CorruptJournal, "expected seq " + std::to_string(last_good + 1) + ", found " +
                                                       std::to_string(r.seq) + "; last good seq " +
                                                       std::to_string(last_good));
        }
        out.push_back(std::move(r));
    }
    return out;
}

std::vector<JournalRecord> read_journal(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::StorageFailure, "cannot read journal '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_journal(ss.str());
}

std::string journal_text(const std::vector<JournalRecord>& records) {
    std::string out;
    for (const auto& r : records) {
        out += r.to_line();
        out += '\n';
    }
    return out;
}

}  // namespace gridbroker
