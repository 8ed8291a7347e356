#pragma once

#include <cstdint>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "gridbroker/types.hpp"

namespace gridbroker {

enum class RecordKind {
    ExperimentCreated,
    QoSChanged,
    JobTransition,
    AttemptClosed,
    QuantumMark,
    AllocationDelta,
    PhaseChanged,
    JobsAdded,
    FailureInjected,
};

std::string_view to_string(RecordKind k);
RecordKind record_kind_from_string(std::string_view s);

/// One line of the journal: {"seq", "t", "kind", "payload"}; `t` is in
/// virtual seconds.
struct JournalRecord {
    std::uint64_t seq = 0;
    SimTime t{0};
    RecordKind kind = RecordKind::QuantumMark;
    nlohmann::json payload = nlohmann::json::object();

    nlohmann::json to_json() const;
    static JournalRecord from_json(const nlohmann::json& j);
    /// Serialized form without the trailing newline.
    std::string to_line() const;
};

/// Append-only destination for journal records. `append` returns only once
/// the record is durable and throws StorageFailure otherwise.
class JournalSink {
public:
    virtual ~JournalSink() = default;
    virtual void append(const JournalRecord& record) = 0;
};

class MemoryJournal final : public JournalSink {
public:
    void append(const JournalRecord& record) override;

    const std::vector<JournalRecord>& records() const { return records_; }
    /// Every append after this call fails until `heal()`.
    void fail_appends() { failing_ = true; }
    void heal() { failing_ = false; }

private:
    std::vector<JournalRecord> records_;
    bool failing_ = false;
};

/// JSON Lines file, flushed after every record.
class FileJournal final : public JournalSink {
public:
    /// Opens for appending; existing content is kept.
    explicit FileJournal(std::string path, bool sync = false);

    void append(const JournalRecord& record) override;
    const std::string& path() const { return path_; }

private:
    std::string path_;
    std::ofstream out_;
    bool sync_;
};

/// Parse JSON Lines text and check sequence contiguity from 1. Throws
/// CorruptJournal naming the last good sequence number.
std::vector<JournalRecord> parse_journal(std::string_view text);
std::vector<JournalRecord> read_journal(const std::string& path);
std::string journal_text(const std::vector<JournalRecord>& records);

}  // namespace gridbroker
